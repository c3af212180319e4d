import itertools

import numpy as np
import pytest

from trafficlab.env import SingleState, step_single
from trafficlab.mdp import (
    CONTINUE, SWITCH, NonConvergence, TablePolicy, TruncatedSpace, bellman_residual,
    build_transitions, evaluate_policy, extract_threshold_curve, greedy, policy_agreement,
    policy_iteration, q_values, read_table_csv, value_iteration, visitation_weights,
    write_table_csv,
)

GAMMA = 0.99


@pytest.fixture(scope="module")
def solved():
    space = TruncatedSpace(30)
    model = build_transitions(space, 0.25, 0.25)
    pol, V = policy_iteration(model, GAMMA)
    return space, model, pol, V


def _naive_next(space, s, a, p1, p2):
    """Outcome distribution obtained by stepping the environment itself."""
    x1, x2, ph = space.state(s)
    out = {}
    for c1, c2 in itertools.product((0, 1), repeat=2):
        prob = (p1 if c1 else 1 - p1) * (p2 if c2 else 1 - p2)
        if prob == 0:
            continue
        n = step_single(SingleState(x1, x2, ph), a, (c1, c2)).next_state
        j = int(space.index(*space.clamp(n.x1, n.x2, n.phase)))
        out[j] = out.get(j, 0.0) + prob
    return out


def test_transitions_match_environment():
    space = TruncatedSpace(4)
    model = build_transitions(space, 0.3, 0.6)
    for s in range(space.size):
        for a in (CONTINUE, SWITCH):
            got = dict(model.next_states(s, a))
            want = _naive_next(space, s, a, 0.3, 0.6)
            assert got.keys() == want.keys()
            for k in want:
                assert got[k] == pytest.approx(want[k], abs=1e-15)


def test_empty_state_four_way_split():
    space = TruncatedSpace(30)
    model = build_transitions(space, 0.25, 0.25)
    got = dict(model.next_states(int(space.index(0, 0, 0)), CONTINUE))
    want = {(0, 0, 0): 0.5625, (0, 1, 0): 0.1875, (1, 0, 0): 0.1875, (1, 1, 0): 0.0625}
    assert {space.state(k): v for k, v in got.items()} == pytest.approx(want)


def test_rows_are_distributions():
    model = build_transitions(TruncatedSpace(10), 0.25, 0.7)
    for P in model.P:
        assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)


def test_clamped_saturation():
    space = TruncatedSpace(6)
    model = build_transitions(space, 1.0, 1.0)
    s = int(space.index(6, 6, 1))
    assert model.next_states(s, CONTINUE) == [(s, 1.0)]


def _naive_value_iteration(x_max, p1, p2, gamma, sweeps):
    space = TruncatedSpace(x_max)
    trans = {(s, a): _naive_next(space, s, a, p1, p2) for s in range(space.size) for a in (0, 1)}
    r = np.array([-(x1 * x1 + x2 * x2) for x1, x2, _ in map(space.state, range(space.size))], float)
    V = np.zeros(space.size)
    for _ in range(sweeps):
        V = np.array([
            max(r[s] + gamma * sum(p * V[j] for j, p in trans[(s, a)].items()) for a in (0, 1))
            for s in range(space.size)
        ])
    return V


def test_policy_iteration_matches_naive_oracle():
    space = TruncatedSpace(4)
    model = build_transitions(space, 0.25, 0.25)
    _, V = policy_iteration(model, 0.9)
    oracle = _naive_value_iteration(4, 0.25, 0.25, 0.9, 400)
    assert np.max(np.abs(V - oracle)) < 1e-9 * np.max(np.abs(oracle))


def test_frozen_values(solved):
    space, model, pol, V = solved
    i = int(space.index(0, 0, 0))
    assert V[i] == pytest.approx(-236.89716367964638, rel=1e-9)
    assert q_values(model, V, GAMMA)[i] == pytest.approx([-236.89716368, -238.43260403], rel=1e-9)
    assert V[space.index(5, 3, 2)] == pytest.approx(-546.8497686196105, rel=1e-9)


def test_bellman_optimality(solved):
    _, model, pol, V = solved
    assert bellman_residual(model, V, GAMMA) < 1e-8
    assert np.array_equal(greedy(q_values(model, V, GAMMA), 1e-9), pol)


def test_value_iteration_agrees(solved):
    space, model, pol, V = solved
    tol = 1e-8
    Vv, sweeps = value_iteration(model, GAMMA, tol=tol)
    # stopping at an update of size tol leaves an error of at most gamma / (1 - gamma) * tol
    assert np.max(np.abs(Vv - V)) <= GAMMA / (1 - GAMMA) * tol
    assert sweeps <= np.log(tol / np.max(np.abs(V))) / np.log(GAMMA) + 500
    Q = q_values(model, V, GAMMA)
    gap = np.abs(Q[:, 1] - Q[:, 0])
    pv = greedy(q_values(model, Vv, GAMMA))
    assert np.array_equal(pv[gap > 1e-9], pol[gap > 1e-9])


def test_zero_arrivals_keep_empty_state_free():
    space = TruncatedSpace(8)
    model = build_transitions(space, 0.0, 0.0)
    _, V = policy_iteration(model, GAMMA)
    for ph in range(4):
        assert abs(V[space.index(0, 0, ph)]) < 1e-9
    Vv, _ = value_iteration(model, GAMMA, tol=1e-10)
    assert np.allclose(Vv, V, atol=1e-7)


def test_symmetry(solved):
    space, _, _, V = solved
    st = space.states()
    mirror = space.index(st[:, 1], st[:, 0], (st[:, 2] + 2) % 4)
    assert np.max(np.abs(V - V[mirror])) < 1e-8 * np.max(np.abs(V))


def test_truncation_insensitivity(solved):
    space, _, _, V = solved
    big = TruncatedSpace(40)
    _, V40 = policy_iteration(build_transitions(big, 0.25, 0.25), GAMMA)
    sub = [(a, b, c) for a in range(16) for b in range(16) for c in range(4)]
    v30 = np.array([V[space.index(*s)] for s in sub])
    v40 = np.array([V40[big.index(*s)] for s in sub])
    assert np.max(np.abs(v30 - v40) / np.abs(v40)) < 1e-6


def test_thresholds(solved):
    space, _, pol, _ = solved
    curve = extract_threshold_curve(pol, space, 0, x1_max=15, x2_max=15)
    assert curve.monotone
    assert curve.thresholds[:8].tolist() == [1, 1, 5, 7, 9, 11, 12, 14]
    assert np.isinf(curve.thresholds[8:]).all()
    mirrored = extract_threshold_curve(pol, space, 2, x1_max=15, x2_max=15)
    assert np.array_equal(mirrored.thresholds, curve.thresholds)
    grid = pol.reshape(31, 31, 4)
    assert (grid[:, :, 1] == SWITCH).all() and (grid[:, :, 3] == SWITCH).all()


def test_threshold_extraction_on_constructed_policies():
    space = TruncatedSpace(10)
    st = space.states()
    never = np.zeros(space.size, int)
    c = extract_threshold_curve(never, space)
    assert np.isinf(c.thresholds).all() and c.monotone
    rule = ((st[:, 1] - st[:, 0]) >= 3).astype(int)
    c = extract_threshold_curve(rule, space, x1_max=7)
    assert c.thresholds.tolist() == [x + 3 for x in range(8)] and c.monotone
    holes = rule.copy()
    holes[space.index(0, 5, 0)] = 0
    assert not extract_threshold_curve(holes, space).monotone


def test_policy_agreement():
    a = np.array([0, 1, 1, 0])
    assert policy_agreement(a, a) == 1.0
    assert policy_agreement(a, 1 - a) == 0.0
    assert policy_agreement(a, [0, 1, 0, 0], [1, 1, 2, 0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        policy_agreement(a, a[:3])


def test_visitation_weights(solved):
    space, _, pol, _ = solved
    w = visitation_weights(space, pol, steps=20_000, seed=1, episode_len=150)
    assert w.sum() == pytest.approx(1.0)
    assert w[space.index(0, 0, 0)] > 0.05
    assert w[space.index(0, 0, 0)] == pytest.approx(w[space.index(0, 0, 2)], abs=0.03)


def test_evaluate_policy_nonconvergence():
    model = build_transitions(TruncatedSpace(3), 0.25, 0.25)
    with pytest.raises(NonConvergence):
        evaluate_policy(model, np.zeros(model.space.size, int), 0.99, tol=1e-30, max_sweeps=3,
                        V0=np.zeros(model.space.size))


def test_table_roundtrip_and_policy(tmp_path, solved):
    space, _, pol, V = solved
    path = tmp_path / "table.csv"
    write_table_csv(path, space, pol, V)
    sp2, pol2, V2 = read_table_csv(path)
    assert sp2 == space and np.array_equal(pol2, pol) and np.array_equal(V2, V)
    tp = TablePolicy(space, pol)
    assert tp.act(np.array([0, 0, 0])) == 0
    assert tp.act(np.array([90, 0, 1])) == 1  # clamped into the table
