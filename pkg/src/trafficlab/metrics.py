"""Trajectory statistics: congestion cost, throughput and phase synchrony."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .env import GREEN, Trajectory


def _norms(traj_or_norms) -> np.ndarray:
    if isinstance(traj_or_norms, Trajectory):
        return traj_or_norms.squared_norms()
    return np.asarray(traj_or_norms, dtype=float)


def discounted_cost(traj_or_norms, gamma: float = 0.99, T: int | None = None) -> float:
    """``-(1/T) * sum_{t=0}^{T} gamma^t |X(t)|^2``.

    Accepts a trajectory or the sequence of squared queue norms. ``T``
    defaults to the trajectory horizon.
    """
    x = _norms(traj_or_norms)
    if T is None:
        T = len(x) - 1
    if T < 1 or len(x) < T + 1:
        raise ValueError(f"need at least T + 1 = {T + 1} states, got {len(x)}")
    w = gamma ** np.arange(T + 1)
    return -float(np.dot(w, x[: T + 1])) / T


def average_queue_length(traj: Trajectory) -> float:
    """Total queued vehicles, averaged over the states ``X(0..T)``."""
    return float(traj.queues.sum(axis=(1, 2)).mean())


def throughput(traj: Trajectory) -> float:
    """Vehicles leaving the network (or served, for one intersection) per slot."""
    return float(traj.exits.sum()) / max(1, traj.horizon)


def _pair_agreement(phases: np.ndarray) -> np.ndarray:
    """Per-slot fraction of node pairs showing the same phase."""
    phases = np.asarray(phases)
    n = phases.shape[1]
    if n < 2:
        raise ValueError("synchrony needs at least two intersections")
    same = np.zeros(len(phases))
    pairs = list(combinations(range(n), 2))
    for i, j in pairs:
        same += phases[:, i] == phases[:, j]
    return same / len(pairs)


def synchrony_index(phases) -> float:
    """Time average of the fraction of intersection pairs sharing a phase."""
    if isinstance(phases, Trajectory):
        phases = phases.phases
    return float(_pair_agreement(phases).mean())


def onset_lag(upstream, downstream, max_lag: int = 10) -> int:
    """Shift of ``downstream`` green indicators best aligned with ``upstream``.

    Returns the ``k`` maximising ``sum_t u(t) d(t + k)`` for the centred
    indicator sequences; positive when the downstream green follows the
    upstream one. Ties go to the smallest ``|k|`` and constant inputs give 0.
    """
    u = (np.asarray(upstream) == GREEN).astype(float)
    d = (np.asarray(downstream) == GREEN).astype(float)
    u -= u.mean()
    d -= d.mean()
    if not u.any() or not d.any():
        return 0
    T = len(u)
    max_lag = min(max_lag, T - 1)
    best_k, best = 0, -np.inf
    for k in sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), -k)):
        if k >= 0:
            c = float(np.dot(u[: T - k], d[k:]))
        else:
            c = float(np.dot(u[-k:], d[: T + k]))
        if c > best + 1e-12:
            best_k, best = k, c
    return best_k


@dataclass
class GreenwaveReport:
    flag: bool
    best_window: tuple[int, int]  # [start, end) slots
    best_synchrony: float
    lags: dict  # "i-j" -> lag

    def to_dict(self) -> dict:
        return {
            "flag": self.flag,
            "best_window": list(self.best_window),
            "best_synchrony": self.best_synchrony,
            "lags": self.lags,
        }


def detect_greenwave(phases, pairs, window: int = 20, threshold: float = 0.9,
                     max_lag: int = 10) -> GreenwaveReport:
    """Flag windows of near-common phases and report per-pair green-onset lags.

    ``pairs`` lists adjacent (upstream, downstream) intersections along
    the avenues, e.g. ``GridTopology.avenue_pairs()``.
    """
    if isinstance(phases, Trajectory):
        phases = phases.phases
    phases = np.asarray(phases)
    if len(phases) < window:
        raise ValueError(f"trajectory of {len(phases)} slots is shorter than the window {window}")
    agree = _pair_agreement(phases)
    csum = np.concatenate([[0.0], np.cumsum(agree)])
    means = (csum[window:] - csum[:-window]) / window
    start = int(np.argmax(means))
    best = float(means[start])
    lags = {f"{i}-{j}": onset_lag(phases[:, i], phases[:, j], max_lag) for i, j in pairs}
    return GreenwaveReport(bool(best >= threshold - 1e-12), (start, start + window), best, lags)
