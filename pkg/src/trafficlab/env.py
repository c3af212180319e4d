"""Discrete-time traffic environments: one intersection, an avenue, a grid.

Light phases cycle 0 -> 1 -> 2 -> 3 -> 0:

    0  green for the avenue (flows 1 and 3), red for cross traffic
    1  yellow for the avenue, red for cross traffic
    2  red for the avenue, green for cross traffic (flows 2 and 4)
    3  red for the avenue, yellow for cross traffic

Each slot the controller emits one bit per intersection, 0 to hold the
phase and 1 to advance it. Departures in a slot are computed from the
queues and phase at the *start* of the slot, so a vehicle arriving in
slot t can leave no earlier than slot t + 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GREEN, YELLOW, RED, ORANGE = 0, 1, 2, 3
N_PHASES = 4

# direction indices into the per-intersection queue array (0-based)
WE, NS, EW, SN = 0, 1, 2, 3
AVENUE_DIRS = (WE, EW)
CROSS_DIRS = (NS, SN)

CHAINED = "chained"
EXTERNAL = "external"


class ActionLengthMismatch(ValueError):
    pass


def advance_phase(phase, bit):
    """Next light phase; works elementwise on arrays."""
    return (phase + bit) % N_PHASES


@dataclass(frozen=True)
class PassingRates:
    avenue: int = 1
    cross: int = 1

    def __post_init__(self):
        if self.avenue < 1 or self.cross < 1:
            raise ValueError("passing rates must be >= 1")


@dataclass(frozen=True)
class ArrivalModel:
    """External arrivals per slot for avenue and cross flows.

    ``kind="bernoulli"`` draws 0/1 with probability ``avenue``/``cross``;
    ``kind="uniform"`` draws an integer uniformly from ``[0, cap]``.
    ``mode`` only matters on grids: ``"chained"`` feeds avenue and cross
    departures to the downstream neighbour and admits external traffic at
    the network boundary only; ``"external"`` gives every intersection
    its own external arrivals and lets departures leave.
    """

    kind: str = "bernoulli"
    avenue: float = 0.25
    cross: float = 0.25
    mode: str = CHAINED

    def __post_init__(self):
        if self.kind not in ("bernoulli", "uniform"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.mode not in (CHAINED, EXTERNAL):
            raise ValueError(f"unknown arrival mode {self.mode!r}")
        if self.kind == "bernoulli":
            if not (0.0 <= self.avenue <= 1.0 and 0.0 <= self.cross <= 1.0):
                raise ValueError("Bernoulli parameters must lie in [0, 1]")
        else:
            if self.avenue < 0 or self.cross < 0:
                raise ValueError("uniform caps must be >= 0")
            if int(self.avenue) != self.avenue or int(self.cross) != self.cross:
                raise ValueError("uniform caps must be integers")

    @property
    def mean_avenue(self) -> float:
        return self.avenue if self.kind == "bernoulli" else self.avenue / 2.0

    @property
    def mean_cross(self) -> float:
        return self.cross if self.kind == "bernoulli" else self.cross / 2.0


def sample_arrivals(model: ArrivalModel, rng: np.random.Generator, shape=(2,)) -> np.ndarray:
    """Draw arrival counts.

    The last axis indexes flows; even positions are avenue flows and odd
    positions cross flows, which matches both the single-intersection
    layout ``(x1, x2)`` and the grid layout ``(WE, NS, EW, SN)``.
    """
    shape = tuple(shape)
    params = np.empty(shape[-1])
    params[0::2] = model.avenue
    params[1::2] = model.cross
    params = np.broadcast_to(params, shape)
    if model.kind == "bernoulli":
        return (rng.random(shape) < params).astype(np.int64)
    return np.floor(rng.random(shape) * (params + 1)).astype(np.int64)


# ---------------------------------------------------------------- single


@dataclass(frozen=True)
class SingleState:
    x1: int
    x2: int
    phase: int

    def __post_init__(self):
        if self.x1 < 0 or self.x2 < 0:
            raise ValueError("queue lengths must be non-negative")
        if self.phase not in (0, 1, 2, 3):
            raise ValueError("phase must be in {0, 1, 2, 3}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.phase], dtype=float)


@dataclass
class StepResult:
    next_state: object
    reward: float
    departures: np.ndarray
    exits: int = 0


def departures_single(state: SingleState, rates: PassingRates = PassingRates()) -> tuple[int, int]:
    if state.phase == GREEN:
        return min(rates.avenue, state.x1), 0
    if state.phase == RED:
        return 0, min(rates.cross, state.x2)
    return 0, 0


def step_single(
    state: SingleState,
    action: int,
    arrivals: Sequence[int],
    rates: PassingRates = PassingRates(),
) -> StepResult:
    bit = int(np.asarray(action).reshape(-1)[0])
    if bit not in (0, 1):
        raise ValueError("action bit must be 0 or 1")
    c1, c2 = int(arrivals[0]), int(arrivals[1])
    if c1 < 0 or c2 < 0:
        raise ValueError("arrivals must be non-negative")
    d1, d2 = departures_single(state, rates)
    x1 = state.x1 + c1 - d1
    x2 = state.x2 + c2 - d2
    nxt = SingleState(x1, x2, advance_phase(state.phase, bit))
    return StepResult(nxt, -float(x1 * x1 + x2 * x2), np.array([d1, d2]), d1 + d2)


# ------------------------------------------------------------------ grid


@dataclass(frozen=True)
class GridTopology:
    """``avenues`` horizontal roads crossed by ``cross_streets`` vertical ones.

    Intersections are indexed row-major: ``n = row * cross_streets + col``.
    A linear avenue with N cross streets is ``GridTopology(1, N)``.
    """

    avenues: int = 1
    cross_streets: int = 1

    def __post_init__(self):
        if self.avenues < 1 or self.cross_streets < 1:
            raise ValueError("topology dimensions must be >= 1")

    @property
    def n(self) -> int:
        return self.avenues * self.cross_streets

    def coords(self, n: int) -> tuple[int, int]:
        return divmod(n, self.cross_streets)

    def boundary_mask(self) -> np.ndarray:
        """(N, 4) mask of queues that receive external traffic in chained mode."""
        rows, cols = np.divmod(np.arange(self.n), self.cross_streets)
        mask = np.zeros((self.n, 4), dtype=bool)
        mask[:, WE] = cols == 0
        mask[:, EW] = cols == self.cross_streets - 1
        mask[:, NS] = rows == 0
        mask[:, SN] = rows == self.avenues - 1
        return mask

    def avenue_pairs(self) -> list[tuple[int, int]]:
        """Adjacent (upstream, downstream) pairs along each avenue, west to east."""
        c = self.cross_streets
        return [(r * c + j, r * c + j + 1) for r in range(self.avenues) for j in range(c - 1)]


@dataclass
class GridState:
    queues: np.ndarray  # (N, 4) integer counts
    phases: np.ndarray  # (N,) phases
    topology: GridTopology = field(default_factory=GridTopology)

    def __post_init__(self):
        self.queues = np.asarray(self.queues, dtype=np.int64).reshape(self.topology.n, 4)
        self.phases = np.asarray(self.phases, dtype=np.int64).reshape(self.topology.n)
        if (self.queues < 0).any():
            raise ValueError("queue lengths must be non-negative")
        if ((self.phases < 0) | (self.phases > 3)).any():
            raise ValueError("phases must be in {0, 1, 2, 3}")

    @classmethod
    def empty(cls, topology: GridTopology) -> "GridState":
        return cls(np.zeros((topology.n, 4), np.int64), np.zeros(topology.n, np.int64), topology)

    def as_array(self) -> np.ndarray:
        """Flat 5N observation ``[X_n1, X_n2, X_n3, X_n4, L_n]`` per intersection."""
        return np.column_stack([self.queues, self.phases]).astype(float).ravel()

    def copy(self) -> "GridState":
        return GridState(self.queues.copy(), self.phases.copy(), self.topology)


def departures_grid(state: GridState, rates: PassingRates = PassingRates()) -> np.ndarray:
    q = state.queues
    d = np.zeros_like(q)
    green = state.phases == GREEN
    red = state.phases == RED
    for i in AVENUE_DIRS:
        d[:, i] = np.where(green, np.minimum(rates.avenue, q[:, i]), 0)
    for i in CROSS_DIRS:
        d[:, i] = np.where(red, np.minimum(rates.cross, q[:, i]), 0)
    return d


def _route_chained(d: np.ndarray, topo: GridTopology) -> tuple[np.ndarray, np.ndarray]:
    """Split departures into downstream inflow and vehicles leaving the network."""
    R, C = topo.avenues, topo.cross_streets
    d4 = d.reshape(R, C, 4)
    inflow = np.zeros_like(d4)
    inflow[:, 1:, WE] = d4[:, :-1, WE]
    inflow[:, :-1, EW] = d4[:, 1:, EW]
    inflow[1:, :, NS] = d4[:-1, :, NS]
    inflow[:-1, :, SN] = d4[1:, :, SN]
    exits = (
        d4[:, -1, WE].sum() + d4[:, 0, EW].sum() + d4[-1, :, NS].sum() + d4[0, :, SN].sum()
    )
    return inflow.reshape(-1, 4), int(exits)


def step_grid(
    state: GridState,
    action: Sequence[int],
    arrivals: np.ndarray,
    rates: PassingRates = PassingRates(),
    mode: str = CHAINED,
) -> StepResult:
    """One slot of the grid dynamics.

    ``arrivals`` is an (N, 4) array of external draws. In chained mode only
    the entries on the network boundary are used; interior queues are fed
    by the upstream neighbour's departures of the same slot, which appear
    in the queue at the next slot.
    """
    topo = state.topology
    bits = np.asarray(action, dtype=np.int64).reshape(-1)
    if bits.size != topo.n:
        raise ActionLengthMismatch(f"expected {topo.n} action bits, got {bits.size}")
    if ((bits != 0) & (bits != 1)).any():
        raise ValueError("action bits must be 0 or 1")
    ext = np.asarray(arrivals, dtype=np.int64).reshape(topo.n, 4)
    if (ext < 0).any():
        raise ValueError("arrivals must be non-negative")

    d = departures_grid(state, rates)
    if mode == CHAINED:
        inflow, exits = _route_chained(d, topo)
        inflow = inflow + np.where(topo.boundary_mask(), ext, 0)
    elif mode == EXTERNAL:
        inflow, exits = ext, int(d.sum())
    else:
        raise ValueError(f"unknown arrival mode {mode!r}")

    queues = state.queues + inflow - d
    nxt = GridState(queues, advance_phase(state.phases, bits), topo)
    return StepResult(nxt, -float((queues * queues).sum()), d, exits)


# ----------------------------------------------------------- environments


class SingleIntersectionEnv:
    """Seeded single-intersection environment.

    Observations are ``[x1, x2, phase]`` float arrays.
    """

    n_intersections = 1
    obs_dim = 3

    def __init__(
        self,
        arrivals: ArrivalModel = ArrivalModel(),
        rates: PassingRates = PassingRates(),
        seed=None,
        initial: SingleState | None = None,
    ):
        self.arrivals = arrivals
        self.rates = rates
        self.initial = initial or SingleState(0, 0, GREEN)
        self.rng = np.random.default_rng(seed)
        self.state = self.initial
        self.t = 0

    def reset(self, seed=None, initial: SingleState | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = initial or self.initial
        self.t = 0
        return self.state.as_array()

    def queues(self) -> np.ndarray:
        return np.array([self.state.x1, self.state.x2, 0, 0])

    def phases(self) -> np.ndarray:
        return np.array([self.state.phase])

    def step(self, action):
        c = sample_arrivals(self.arrivals, self.rng, (2,))
        res = step_single(self.state, action, c, self.rates)
        self.state = res.next_state
        self.t += 1
        return self.state.as_array(), res.reward, res


class GridEnv:
    """Seeded avenue / grid environment with a 5N observation vector."""

    def __init__(
        self,
        topology: GridTopology = GridTopology(1, 3),
        arrivals: ArrivalModel = ArrivalModel(avenue=0.5, cross=0.25),
        rates: PassingRates = PassingRates(),
        seed=None,
    ):
        self.topology = topology
        self.arrivals = arrivals
        self.rates = rates
        self.rng = np.random.default_rng(seed)
        self.state = GridState.empty(topology)
        self.t = 0

    @property
    def n_intersections(self) -> int:
        return self.topology.n

    @property
    def obs_dim(self) -> int:
        return 5 * self.topology.n

    def reset(self, seed=None, initial: GridState | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = initial.copy() if initial is not None else GridState.empty(self.topology)
        self.t = 0
        return self.state.as_array()

    def queues(self) -> np.ndarray:
        return self.state.queues.ravel()

    def phases(self) -> np.ndarray:
        return self.state.phases.copy()

    def step(self, action):
        c = sample_arrivals(self.arrivals, self.rng, (self.topology.n, 4))
        res = step_grid(self.state, action, c, self.rates, self.arrivals.mode)
        self.state = res.next_state
        self.t += 1
        return self.state.as_array(), res.reward, res


# -------------------------------------------------------------- trajectory


@dataclass
class Trajectory:
    """States X(0..T), phases, and the actions/rewards of slots 0..T-1.

    ``queues`` has shape (T+1, N, 4); single-intersection runs store the
    avenue and cross queues in directions 1 and 2 and zeros elsewhere.
    """

    queues: np.ndarray
    phases: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    exits: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def squared_norms(self) -> np.ndarray:
        q = self.queues.astype(float)
        return (q * q).sum(axis=(1, 2))


def rollout(env, policy, horizon: int, seed=None, initial=None) -> Trajectory:
    obs = env.reset(seed=seed, initial=initial)
    if hasattr(policy, "reset"):
        policy.reset()
    n = env.n_intersections
    queues = np.zeros((horizon + 1, n, 4), np.int64)
    phases = np.zeros((horizon + 1, n), np.int64)
    actions = np.zeros((horizon, n), np.int64)
    rewards = np.zeros(horizon)
    exits = np.zeros(horizon, np.int64)
    queues[0] = env.queues().reshape(n, 4)
    phases[0] = env.phases()
    for t in range(horizon):
        a = np.asarray(policy.act(obs), dtype=np.int64).reshape(n)
        obs, r, res = env.step(a if n > 1 else int(a[0]))
        actions[t] = a
        rewards[t] = r
        exits[t] = res.exits
        queues[t + 1] = env.queues().reshape(n, 4)
        phases[t + 1] = env.phases()
    return Trajectory(queues, phases, actions, rewards, exits)


TRAJECTORY_COLUMNS = ("t", "intersection", "x1", "x2", "x3", "x4", "phase", "action", "reward")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per (slot, intersection).

    Row ``t`` holds the state at the start of slot t, the action chosen in
    that slot and the reward it earned; the final row (t = T) carries the
    terminal state with empty action and reward.
    """
    T = traj.horizon
    n = traj.queues.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for t in range(T + 1):
            for i in range(n):
                q = traj.queues[t, i]
                act = "" if t == T else int(traj.actions[t, i])
                rew = "" if t == T else repr(float(traj.rewards[t]))
                w.writerow([t, i, *map(int, q), int(traj.phases[t, i]), act, rew])


def read_trajectory_csv(path) -> Trajectory:
    rows = list(csv.DictReader(open(path, newline="")))
    T = max(int(r["t"]) for r in rows)
    n = max(int(r["intersection"]) for r in rows) + 1
    queues = np.zeros((T + 1, n, 4), np.int64)
    phases = np.zeros((T + 1, n), np.int64)
    actions = np.zeros((T, n), np.int64)
    rewards = np.zeros(T)
    for r in rows:
        t, i = int(r["t"]), int(r["intersection"])
        queues[t, i] = [int(r[k]) for k in ("x1", "x2", "x3", "x4")]
        phases[t, i] = int(r["phase"])
        if t < T:
            actions[t, i] = int(r["action"])
            rewards[t] = float(r["reward"])
    return Trajectory(queues, phases, actions, rewards, np.zeros(T, np.int64))


def make_env(scenario: str, arrivals: ArrivalModel, rates: PassingRates, seed=None):
    """Build an environment from a scenario string.

    ``"single"``, ``"avenue-N"`` (a 1 x N avenue) or ``"grid-RxC"``.
    """
    topo = parse_scenario(scenario)
    if topo is None:
        return SingleIntersectionEnv(arrivals, rates, seed)
    return GridEnv(topo, arrivals, rates, seed)


def parse_scenario(scenario: str) -> GridTopology | None:
    s = scenario.strip().lower()
    if s == "single":
        return None
    try:
        if s.startswith("avenue-"):
            return GridTopology(1, int(s.split("-", 1)[1]))
        if s.startswith("grid-"):
            r, c = s.split("-", 1)[1].split("x")
            return GridTopology(int(r), int(c))
    except ValueError:
        pass
    raise ValueError(f"unrecognised scenario {scenario!r}")


def phase_transitions(phases: Iterable[int]) -> set[tuple[int, int]]:
    p = list(phases)
    return set(zip(p[:-1], p[1:]))
