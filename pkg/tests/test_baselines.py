import logging

import numpy as np
import pytest

from trafficlab.baselines import (
    DesyncDetected, FixedCyclePolicy, FixedCycleSpec, GreenwavePolicy, RandomPolicy,
    ThresholdPolicy, ThresholdSpec, make_policy,
)
from trafficlab.env import (
    ArrivalModel, GridEnv, GridTopology, PassingRates, SingleIntersectionEnv, make_env, rollout,
)


def run_bits(policy, phases):
    """Feed a phase sequence to a single-intersection policy and collect bits."""
    return [policy.act(np.array([0, 0, p])) for p in phases]


def test_fixed_cycle_counter():
    pol = FixedCyclePolicy(FixedCycleSpec(green=3))
    assert run_bits(pol, [0, 0, 0]) == [0, 0, 1]


def test_fixed_cycle_all_ones():
    env = SingleIntersectionEnv(ArrivalModel(avenue=0.3, cross=0.3), seed=0)
    traj = rollout(env, FixedCyclePolicy(FixedCycleSpec(1, 1, 1, 1)), 40, seed=1)
    assert (traj.actions == 1).all()


@pytest.mark.parametrize("spec", [FixedCycleSpec(), FixedCycleSpec(3, 7, 2, 1)])
def test_fixed_cycle_period_independent_of_traffic(spec):
    acts = []
    for p in (0.1, 0.6):
        env = SingleIntersectionEnv(ArrivalModel(avenue=p, cross=p), seed=0)
        traj = rollout(env, FixedCyclePolicy(spec), 5 * spec.period, seed=2)
        acts.append(traj.actions[:, 0])
        ph = traj.phases[:, 0]
        starts = np.flatnonzero((ph[1:] == 0) & (ph[:-1] == 3)) + 1
        assert np.all(np.diff(starts) == spec.period)
    assert np.array_equal(acts[0], acts[1])
    a = acts[0]
    assert np.array_equal(a[spec.period:], a[:-spec.period])


def test_fixed_cycle_rejects_zero_dwell():
    with pytest.raises(ValueError):
        FixedCycleSpec(green=0)


def test_fixed_cycle_offsets_delay_first_switch():
    pol = FixedCyclePolicy(FixedCycleSpec(green=2), offsets=[0, 1])
    obs = np.zeros(10)
    assert pol.act(obs).tolist() == [0, 0]
    assert pol.act(obs).tolist() == [1, 0]


@pytest.mark.parametrize("state,bit", [((2, 5, 0), 1), ((2, 4, 0), 0), ((9, 0, 1), 1), ((0, 9, 3), 1),
                                       ((5, 2, 2), 1), ((4, 2, 2), 0)])
def test_threshold_rule(state, bit):
    assert ThresholdPolicy(ThresholdSpec(3, 3)).act(np.array(state)) == bit


def test_threshold_rejects_negative():
    with pytest.raises(ValueError):
        ThresholdSpec(-1, 0)


def test_threshold_symmetric_long_run():
    env = SingleIntersectionEnv(ArrivalModel(avenue=0.3, cross=0.3), seed=4)
    traj = rollout(env, ThresholdPolicy(ThresholdSpec(2, 2)), 60_000, seed=5)
    x1, x2 = traj.queues[:, 0, 0].mean(), traj.queues[:, 0, 1].mean()
    assert abs(x1 - x2) < 0.05 * (x1 + x2)


def test_greenwave_scheduled_synchrony():
    env = make_env("grid-2x3", ArrivalModel(avenue=0.4, cross=0.2), PassingRates(), seed=0)
    traj = rollout(env, GreenwavePolicy("scheduled", green=1, red=1), 60, seed=1)
    assert (traj.phases == traj.phases[:, :1]).all()
    assert len(set(traj.phases[:, 0].tolist())) == 4


def test_greenwave_aggregate_synchrony_random_traffic():
    for seed in range(5):
        env = make_env("avenue-4", ArrivalModel(avenue=0.5, cross=0.3), PassingRates(), seed=seed)
        pol = GreenwavePolicy("aggregate", critical=3)
        traj = rollout(env, pol, 300, seed=seed)
        assert (traj.phases == traj.phases[:, :1]).all()
        assert pol.desync_events == 0


def _grid_obs(avenue, cross, phase, n=3):
    obs = np.zeros((n, 5))
    obs[:, 0] = avenue / n
    obs[:, 1] = cross / n
    obs[:, 4] = phase
    return obs.ravel()


def test_greenwave_aggregate_examples():
    pol = GreenwavePolicy("aggregate", critical=5)
    assert pol.act(_grid_obs(10, 2, 0)).tolist() == [0, 0, 0]
    assert pol.act(_grid_obs(2, 10, 0)).tolist() == [1, 1, 1]
    assert pol.act(_grid_obs(10, 2, 2)).tolist() == [1, 1, 1]
    assert pol.act(_grid_obs(0, 0, 1)).tolist() == [1, 1, 1]


def test_greenwave_desync(caplog):
    obs = np.zeros(10)
    obs[4], obs[9] = 0, 2
    pol = GreenwavePolicy()
    with caplog.at_level(logging.WARNING):
        assert pol.act(obs).tolist() == [1, 1]
    assert pol.desync_events == 1 and "out of sync" in caplog.text
    with pytest.raises(DesyncDetected):
        GreenwavePolicy(strict=True).act(obs)


def test_random_policy_reproducible():
    a = [RandomPolicy(seed=3).act(np.zeros(15)).tolist() for _ in range(2)]
    assert a[0] == a[1]
    bits = [RandomPolicy(seed=4).act(np.zeros(3)) for _ in range(1)]
    assert bits[0] in (0, 1)


def test_make_policy():
    assert isinstance(make_policy("fixed-cycle", {"green": 2, "offsets": [0, 1]}), FixedCyclePolicy)
    assert isinstance(make_policy("threshold", {"tau0": 1}), ThresholdPolicy)
    assert make_policy("greenwave", {"mode": "scheduled"}).mode == "scheduled"
    assert isinstance(make_policy("random", seed=1), RandomPolicy)
    with pytest.raises(ValueError):
        make_policy("sotl")
    with pytest.raises(ValueError):
        GreenwavePolicy("eager")


def test_policies_on_grid_env_shapes():
    env = GridEnv(GridTopology(2, 2), seed=0)
    for name in ("fixed-cycle", "threshold", "greenwave", "random"):
        traj = rollout(env, make_policy(name, seed=0), 20, seed=1)
        assert traj.actions.shape == (20, 4)
