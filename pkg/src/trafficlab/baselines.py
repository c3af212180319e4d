"""Reference controllers sharing the ``act(obs) / reset()`` interface.

Observations are the environment vectors: ``[x1, x2, phase]`` for a
single intersection and ``[X1, X2, X3, X4, L]`` per node for a grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .env import GREEN, ORANGE, RED, YELLOW

log = logging.getLogger(__name__)


class DesyncDetected(RuntimeError):
    pass


def obs_phases(obs) -> np.ndarray:
    obs = np.asarray(obs)
    if obs.size == 3:
        return np.array([int(obs[2])])
    return obs[4::5].astype(np.int64)


def obs_avenue_cross(obs) -> tuple[np.ndarray, np.ndarray]:
    """Per-node avenue and cross queue totals."""
    obs = np.asarray(obs, dtype=float)
    if obs.size == 3:
        return obs[:1], obs[1:2]
    q = obs.reshape(-1, 5)[:, :4]
    return q[:, 0] + q[:, 2], q[:, 1] + q[:, 3]


def _out(bits: np.ndarray):
    return int(bits[0]) if bits.size == 1 else bits


@dataclass(frozen=True)
class FixedCycleSpec:
    green: int = 5
    red: int = 5
    yellow: int = 1
    orange: int = 1

    def __post_init__(self):
        if min(self.green, self.red, self.yellow, self.orange) < 1:
            raise ValueError("every dwell must be at least one slot")

    @property
    def period(self) -> int:
        return self.green + self.yellow + self.red + self.orange

    def dwell(self, phase: int) -> int:
        return (self.green, self.yellow, self.red, self.orange)[phase]


class FixedCyclePolicy:
    """Switch once the current phase has been held for its configured number of slots.

    ``offsets[n]`` delays node n's first switch by that many slots, which
    staggers otherwise identical cycles.
    """

    def __init__(self, spec: FixedCycleSpec = FixedCycleSpec(), offsets=None):
        self.spec = spec
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.int64)
        self.reset()

    def reset(self):
        self._phase = None
        self._dwell = None

    def act(self, obs):
        ph = obs_phases(obs)
        if self._phase is None:
            off = np.zeros(len(ph), np.int64) if self.offsets is None else self.offsets
            self._dwell = 1 - off
        else:
            same = ph == self._phase
            self._dwell = np.where(same, self._dwell + 1, 1)
        self._phase = ph.copy()
        need = np.array([self.spec.dwell(int(p)) for p in ph])
        return _out((self._dwell >= need).astype(np.int64))


@dataclass(frozen=True)
class ThresholdSpec:
    tau0: float = 3.0  # in green: switch once cross exceeds avenue by this much
    tau2: float = 3.0  # in red: switch once avenue exceeds cross by this much

    def __post_init__(self):
        if self.tau0 < 0 or self.tau2 < 0:
            raise ValueError("thresholds must be non-negative")


def threshold_bits(phases, avenue, cross, spec: ThresholdSpec) -> np.ndarray:
    phases = np.asarray(phases)
    bits = np.ones(len(phases), np.int64)  # transitional phases clear in one slot
    g = phases == GREEN
    r = phases == RED
    bits[g] = (cross[g] - avenue[g] >= spec.tau0).astype(np.int64)
    bits[r] = (avenue[r] - cross[r] >= spec.tau2).astype(np.int64)
    return bits


class ThresholdPolicy:
    """Queue-difference rule, applied independently at every node."""

    def __init__(self, spec: ThresholdSpec = ThresholdSpec()):
        self.spec = spec

    def reset(self):
        pass

    def act(self, obs):
        av, cr = obs_avenue_cross(obs)
        return _out(threshold_bits(obs_phases(obs), av, cr, self.spec))


class GreenwavePolicy:
    """All nodes switch together.

    ``mode="aggregate"`` compares the summed avenue queue with the summed
    cross queue against ``critical``; ``mode="scheduled"`` holds green for
    ``green`` slots and red for ``red`` slots with one-slot transitions.
    If the phases are found unequal the policy logs it and forces every
    node to switch (or raises ``DesyncDetected`` when ``strict``).
    """

    def __init__(self, mode: str = "aggregate", critical: float = 5.0, green: int = 5, red: int = 5,
                 strict: bool = False):
        if mode not in ("aggregate", "scheduled"):
            raise ValueError(f"unknown greenwave mode {mode!r}")
        if critical < 0:
            raise ValueError("critical value must be non-negative")
        self.mode, self.critical, self.strict = mode, critical, strict
        self.spec = FixedCycleSpec(green, red, 1, 1)
        self.desync_events = 0
        self.reset()

    def reset(self):
        self._phase = None
        self._dwell = 0

    def act(self, obs):
        ph = obs_phases(obs)
        n = len(ph)
        if (ph != ph[0]).any():
            self.desync_events += 1
            if self.strict:
                raise DesyncDetected(f"phases differ across nodes: {ph.tolist()}")
            log.warning("greenwave phases out of sync %s; forcing a common switch", ph.tolist())
            return _out(np.ones(n, np.int64))
        phase = int(ph[0])
        if self.mode == "scheduled":
            self._dwell = self._dwell + 1 if phase == self._phase else 1
            self._phase = phase
            bit = int(self._dwell >= self.spec.dwell(phase))
        elif phase in (YELLOW, ORANGE):
            bit = 1
        else:
            av, cr = obs_avenue_cross(obs)
            A, C = av.sum(), cr.sum()
            bit = int(C - A >= self.critical) if phase == GREEN else int(A - C >= self.critical)
        return _out(np.full(n, bit, np.int64))


class RandomPolicy:
    """Independent fair (or ``p``-biased) switch bits."""

    def __init__(self, p: float = 0.5, seed=None):
        self.p = p
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self):
        pass

    def act(self, obs):
        n = len(obs_phases(obs))
        return _out((self.rng.random(n) < self.p).astype(np.int64))


def make_policy(name: str, params: dict | None = None, seed=None):
    params = dict(params or {})
    if name == "fixed-cycle":
        offsets = params.pop("offsets", None)
        return FixedCyclePolicy(FixedCycleSpec(**params), offsets)
    if name == "threshold":
        return ThresholdPolicy(ThresholdSpec(**params))
    if name == "greenwave":
        return GreenwavePolicy(**params)
    if name == "random":
        return RandomPolicy(seed=seed, **params)
    raise ValueError(f"unknown policy {name!r}")
