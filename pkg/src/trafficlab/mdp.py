"""Exact solution of the single-intersection MDP on a truncated state space.

States are ``(x1, x2, phase)`` with queues clamped to ``[0, x_max]``.
The solver maximises discounted reward with the per-state reward
``-(x1**2 + x2**2)`` charged in the current state. Because that reward
does not depend on the action, the greedy policies coincide with those
of the post-step reward used by the environment.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .env import PassingRates, SingleState, departures_single

CONTINUE, SWITCH = 0, 1


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TruncatedSpace:
    x_max: int = 30

    @property
    def size(self) -> int:
        return (self.x_max + 1) ** 2 * 4

    def index(self, x1, x2, phase):
        return (np.asarray(x1) * (self.x_max + 1) + np.asarray(x2)) * 4 + np.asarray(phase)

    def state(self, idx: int) -> tuple[int, int, int]:
        rest, phase = divmod(int(idx), 4)
        x1, x2 = divmod(rest, self.x_max + 1)
        return x1, x2, phase

    def states(self) -> np.ndarray:
        """(size, 3) array of all states in index order."""
        r = np.arange(self.x_max + 1)
        x1, x2, ph = np.meshgrid(r, r, np.arange(4), indexing="ij")
        return np.column_stack([x1.ravel(), x2.ravel(), ph.ravel()])

    def clamp(self, x1, x2, phase):
        return min(int(x1), self.x_max), min(int(x2), self.x_max), int(phase)


@dataclass
class TransitionModel:
    space: TruncatedSpace
    P: tuple  # one CSR matrix per action
    reward: np.ndarray

    def next_states(self, s: int, a: int) -> list[tuple[int, float]]:
        row = self.P[a].getrow(s)
        return list(zip(row.indices.tolist(), row.data.tolist()))


def build_transitions(
    space: TruncatedSpace,
    p1: float = 0.25,
    p2: float = 0.25,
    rates: PassingRates = PassingRates(),
) -> TransitionModel:
    """Enumerate the four Bernoulli arrival outcomes for every (state, action).

    Queue values pushed above ``x_max`` are clamped to ``x_max``.
    """
    n = space.size
    outcomes = [
        ((c1, c2), (p1 if c1 else 1 - p1) * (p2 if c2 else 1 - p2))
        for c1, c2 in itertools.product((0, 1), repeat=2)
    ]
    mats = []
    for a in (CONTINUE, SWITCH):
        rows, cols, vals = [], [], []
        for s, (x1, x2, ph) in enumerate(space.states()):
            d1, d2 = departures_single(SingleState(int(x1), int(x2), int(ph)), rates)
            nph = (ph + a) % 4
            for (c1, c2), prob in outcomes:
                if prob == 0.0:
                    continue
                y1 = min(x1 + c1 - d1, space.x_max)
                y2 = min(x2 + c2 - d2, space.x_max)
                rows.append(s)
                cols.append(space.index(y1, y2, nph))
                vals.append(prob)
        # duplicates (clamped outcomes) are summed by the constructor
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))
    st = space.states()
    reward = -(st[:, 0].astype(float) ** 2 + st[:, 1].astype(float) ** 2)
    return TransitionModel(space, tuple(mats), reward)


def q_values(model: TransitionModel, V: np.ndarray, gamma: float) -> np.ndarray:
    """(size, 2) action values ``r(s) + gamma * E[V(s') | s, a]``."""
    return np.column_stack([model.reward + gamma * (P @ V) for P in model.P])


def greedy(Q: np.ndarray, atol: float = 0.0) -> np.ndarray:
    """Argmax over actions; ties (within ``atol``) go to continue."""
    return (Q[:, SWITCH] > Q[:, CONTINUE] + atol).astype(np.int64)


def bellman_residual(model: TransitionModel, V: np.ndarray, gamma: float) -> float:
    return float(np.max(np.abs(q_values(model, V, gamma).max(axis=1) - V)))


def evaluate_policy(
    model: TransitionModel,
    policy: np.ndarray,
    gamma: float,
    tol: float = 1e-10,
    max_sweeps: int = 100_000,
    V0: np.ndarray | None = None,
) -> np.ndarray:
    """Iterative policy evaluation.

    The linear system is solved directly and then polished by fixed-point
    sweeps until the evaluation residual falls below ``tol``.
    """
    P = _policy_matrix(model, policy)
    n = model.space.size
    A = (sp.identity(n, format="csc") - gamma * P).tocsc()
    V = sp.linalg.spsolve(A, model.reward) if V0 is None else V0.copy()
    for _ in range(max_sweeps):
        V_new = model.reward + gamma * (P @ V)
        res = np.max(np.abs(V_new - V))
        V = V_new
        if res < tol:
            return V
    raise NonConvergence(f"policy evaluation residual {res:.3e} after {max_sweeps} sweeps")


def _policy_matrix(model: TransitionModel, policy: np.ndarray):
    mask = sp.diags(policy.astype(float))
    keep = sp.diags(1.0 - policy.astype(float))
    return (keep @ model.P[CONTINUE] + mask @ model.P[SWITCH]).tocsr()


def policy_iteration(
    model: TransitionModel,
    gamma: float = 0.99,
    max_iter: int = 1000,
    eval_tol: float = 1e-10,
    tie_tol: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Howard policy iteration starting from "always continue".

    The policy is only changed where the improvement exceeds ``tie_tol``,
    which keeps the iteration from cycling between numerically tied actions.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    policy = np.zeros(model.space.size, dtype=np.int64)
    V = None
    for _ in range(max_iter):
        V = evaluate_policy(model, policy, gamma, eval_tol)
        Q = q_values(model, V, gamma)
        current = Q[np.arange(len(policy)), policy]
        better = Q.max(axis=1) > current + tie_tol
        if not better.any():
            # final greedy pass with the deterministic tie rule
            return greedy(Q, tie_tol), V
        policy = np.where(better, Q.argmax(axis=1), policy)
    raise NonConvergence(f"policy iteration did not stabilise in {max_iter} iterations")


def value_iteration(
    model: TransitionModel,
    gamma: float = 0.99,
    tol: float = 1e-8,
    max_sweeps: int = 200_000,
    V0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Jacobi value iteration until the sup-norm Bellman residual is below ``tol``.

    Returns the value table and the number of sweeps used.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(model.space.size) if V0 is None else V0.copy()
    for k in range(1, max_sweeps + 1):
        V_new = q_values(model, V, gamma).max(axis=1)
        res = np.max(np.abs(V_new - V))
        V = V_new
        if res < tol:
            # residual of the returned table is at most gamma * res
            return V, k
    raise NonConvergence(f"value iteration residual {res:.3e} after {max_sweeps} sweeps")


def greedy_policy(model: TransitionModel, V: np.ndarray, gamma: float, tie_tol: float = 0.0):
    return greedy(q_values(model, V, gamma), tie_tol)


def policy_grid(space: TruncatedSpace, policy: np.ndarray) -> np.ndarray:
    """Reshape a policy table to ``[x1, x2, phase]``."""
    m = space.x_max + 1
    return np.asarray(policy).reshape(m, m, 4)


@dataclass
class ThresholdCurve:
    thresholds: np.ndarray  # tau(x1); inf where the light never switches
    monotone: bool  # switch region upward-closed in x2 for every x1
    phase: int = 0


def extract_threshold_curve(
    policy: np.ndarray,
    space: TruncatedSpace,
    phase: int = 0,
    x1_max: int | None = None,
    x2_max: int | None = None,
) -> ThresholdCurve:
    """Smallest competing queue that triggers a switch, per serving queue length.

    For phase 0 this is ``tau(x1) = min{x2 : pi(x1, x2, 0) = 1}``. For
    phase 2 the roles of the two queues are exchanged, so the curve maps
    ``x2 -> min{x1 : pi(x1, x2, 2) = 1}``.

    ``x2_max`` limits the competing-queue range that is inspected; states
    next to the truncation bound are distorted by clamping.
    """
    grid = policy_grid(space, policy)[:, :, phase]
    if phase == 2:
        grid = grid.T
    if x2_max is not None:
        grid = grid[:, : x2_max + 1]
    hi = space.x_max if x1_max is None else min(x1_max, space.x_max)
    tau = np.full(hi + 1, np.inf)
    monotone = True
    for x in range(hi + 1):
        row = grid[x]
        hits = np.flatnonzero(row == SWITCH)
        if hits.size:
            tau[x] = hits[0]
            if not (row[hits[0]:] == SWITCH).all():
                monotone = False
    return ThresholdCurve(tau, monotone, phase)


def policy_agreement(policy_a, policy_b, weights=None) -> float:
    a = np.asarray(policy_a).ravel()
    b = np.asarray(policy_b).ravel()
    if a.shape != b.shape:
        raise ValueError("policies are defined on different state spaces")
    w = np.ones(a.size) if weights is None else np.asarray(weights, float).ravel()
    if w.sum() <= 0:
        raise ValueError("weights must have positive mass")
    return float(w[a == b].sum() / w.sum())


def visitation_weights(
    space: TruncatedSpace,
    policy: np.ndarray,
    p1: float = 0.25,
    p2: float = 0.25,
    steps: int = 100_000,
    seed=0,
    episode_len: int | None = None,
    rates: PassingRates = PassingRates(),
) -> np.ndarray:
    """State visitation frequencies of ``policy`` estimated by simulation.

    Simulation runs the unbounded environment from an empty intersection
    and clamps observed queues to ``x_max``. With ``episode_len`` the run
    restarts from the empty state every ``episode_len`` slots.
    """
    from .env import step_single

    rng = np.random.default_rng(seed)
    counts = np.zeros(space.size)
    pol = np.asarray(policy)
    state = SingleState(0, 0, 0)
    for t in range(steps):
        if episode_len and t % episode_len == 0:
            state = SingleState(0, 0, 0)
        idx = int(space.index(*space.clamp(state.x1, state.x2, state.phase)))
        counts[idx] += 1
        c = (int(rng.random() < p1), int(rng.random() < p2))
        state = step_single(state, int(pol[idx]), c, rates).next_state
    return counts / counts.sum()


class TablePolicy:
    """Acts from a solved policy table; queues beyond ``x_max`` are clamped."""

    def __init__(self, space: TruncatedSpace, policy: np.ndarray):
        self.space = space
        self.policy = np.asarray(policy, dtype=np.int64)

    def reset(self):
        pass

    def act(self, obs):
        x1, x2, ph = (int(round(v)) for v in np.asarray(obs)[:3])
        return int(self.policy[self.space.index(*self.space.clamp(x1, x2, ph))])


def write_table_csv(path, space: TruncatedSpace, policy: np.ndarray, V: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "phase", "action", "value"])
        for (x1, x2, ph), a, v in zip(space.states(), policy, V):
            w.writerow([int(x1), int(x2), int(ph), int(a), repr(float(v))])


def read_table_csv(path) -> tuple[TruncatedSpace, np.ndarray, np.ndarray]:
    rows = list(csv.DictReader(open(path, newline="")))
    x_max = max(int(r["x1"]) for r in rows)
    space = TruncatedSpace(x_max)
    policy = np.zeros(space.size, np.int64)
    V = np.zeros(space.size)
    for r in rows:
        i = int(space.index(int(r["x1"]), int(r["x2"]), int(r["phase"])))
        policy[i] = int(r["action"])
        V[i] = float(r["value"])
    return space, policy, V
