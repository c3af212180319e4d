"""Deterministic fluid model of an avenue crossed by N streets.

Avenue traffic enters node 1 at rate ``lam0`` and passes every node in
turn; cross traffic enters node n at rate ``lam[n]`` and leaves after it.
Every node runs a periodic cycle ``yellow -> red -> orange -> green`` of
lengths ``Y, R_n, O, G_n``. Avenue fluid moves only during green, cross
fluid only during red, both at unit rate when backed up.

The closed forms below give stability conditions, the lower bounds on
long-run average queue lengths, and the averages achieved by the
synchronised greenwave schedule. ``simulate_fluid`` integrates the
piecewise-linear dynamics exactly so that each closed form can be
checked against an independent computation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

YELLOW_SEG, RED_SEG, ORANGE_SEG, GREEN_SEG = 0, 1, 2, 3


class InvalidParams(ValueError):
    pass


class UnstableSchedule(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidParams:
    lam0: float
    lam: tuple
    Y: float = 1.0
    O: float = 1.0

    def __post_init__(self):
        lam = tuple(float(x) for x in np.atleast_1d(self.lam))
        object.__setattr__(self, "lam", lam)
        if not lam:
            raise InvalidParams("need at least one node")
        if self.lam0 < 0 or min(lam) < 0:
            raise InvalidParams("arrival rates must be non-negative")
        if self.Y <= 0 or self.O <= 0:
            raise InvalidParams("yellow and orange durations must be positive")
        bad = [n for n, x in enumerate(lam) if self.lam0 + x >= 1.0]
        if bad:
            raise InvalidParams(f"lam0 + lam_n >= 1 at nodes {bad}; no schedule can be stable")

    @classmethod
    def uniform(cls, lam0, lam1, n_nodes=3, Y=1.0, O=1.0) -> "FluidParams":
        return cls(lam0, (lam1,) * n_nodes, Y, O)

    @property
    def n(self) -> int:
        return len(self.lam)

    @property
    def lam_max(self) -> float:
        return max(self.lam)

    @property
    def yo(self) -> float:
        return self.Y + self.O

    def lam_array(self) -> np.ndarray:
        return np.array(self.lam)


@dataclass(frozen=True)
class Schedule:
    """Constant-cycle timing plan: per-node green/red lengths and cycle offsets.

    Node n starts its k-th cycle (with yellow) at ``offsets[n] + k * U[n]``.
    """

    G: np.ndarray
    R: np.ndarray
    Y: float = 1.0
    O: float = 1.0
    offsets: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        G = np.atleast_1d(np.asarray(self.G, float))
        R = np.broadcast_to(np.asarray(self.R, float), G.shape).copy()
        off = np.zeros_like(G) if self.offsets is None else np.broadcast_to(
            np.asarray(self.offsets, float), G.shape
        ).copy()
        if (G <= 0).any() or (R <= 0).any():
            raise InvalidParams("green and red durations must be positive")
        U = G + R + self.Y + self.O
        off = np.mod(off, U)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "offsets", off)

    @classmethod
    def for_params(cls, params: FluidParams, G, R, offsets=None) -> "Schedule":
        G = np.broadcast_to(np.asarray(G, float), (params.n,))
        return cls(G, R, params.Y, params.O, offsets)

    @property
    def n(self) -> int:
        return len(self.G)

    @property
    def U(self) -> np.ndarray:
        return self.G + self.R + self.Y + self.O

    def segment_edges(self, n: int) -> tuple[float, float, float, float, float]:
        Y, R, O = self.Y, float(self.R[n]), self.O
        return (0.0, Y, Y + R, Y + R + O, float(self.U[n]))


# ------------------------------------------------------------ closed forms


@dataclass
class StabilityReport:
    avenue_ok: np.ndarray
    cross_ok: np.ndarray
    avenue_margin: np.ndarray  # G_n / U_n - lam0
    cross_margin: np.ndarray  # R_n / U_n - lam_n
    min_cycle: np.ndarray  # (Y + O) / (1 - lam0 - lam_n)
    cycle_ok: np.ndarray

    @property
    def stable(self) -> bool:
        return bool(self.avenue_ok.all() and self.cross_ok.all())


def check_stability(params: FluidParams, schedule: Schedule, atol: float = 1e-12) -> StabilityReport:
    U = schedule.U
    am = schedule.G / U - params.lam0
    cm = schedule.R / U - params.lam_array()
    min_cycle = params.yo / (1.0 - params.lam0 - params.lam_array())
    return StabilityReport(am >= -atol, cm >= -atol, am, cm, min_cycle, U >= min_cycle * (1 - atol))


@dataclass
class SplitBounds:
    """Lower bounds on ``(G+Y+O)^2 / U`` and ``(R+Y+O)^2 / U`` at one node."""

    green_term: float  # lam0 (p+1)^2 (Y+O) / p
    red_term: float  # lam_n (q+1)^2 (Y+O) / q
    p: float
    q: float
    green_tight: bool | None = None  # G_n == p (Y+O); None without a schedule
    red_tight: bool | None = None  # R_n == q (Y+O)


def split_bounds(params: FluidParams, n: int = 0, schedule: Schedule | None = None) -> SplitBounds:
    lam0, lam_n, yo = params.lam0, params.lam[n], params.yo
    slack = 1.0 - lam0 - lam_n
    p = max(1.0, lam0 / slack)
    q = max(1.0, lam_n / slack)
    green = lam0 * (p + 1) ** 2 * yo / p
    red = lam_n * (q + 1) ** 2 * yo / q if lam_n > 0 else 0.0
    gt = rt = None
    if schedule is not None:
        gt = math.isclose(schedule.G[n], p * yo, rel_tol=1e-9)
        rt = math.isclose(schedule.R[n], q * yo, rel_tol=1e-9)
    return SplitBounds(green, red, p, q, gt, rt)


@dataclass
class QueueLowerBounds:
    phi1: float  # avenue queue at node 1, given the schedule
    psi: np.ndarray  # cross queues, given the schedule
    phi1_free: float  # schedule-free bound on phi1
    psi_free: np.ndarray  # schedule-free bounds on psi


def schedule_free_bounds(params: FluidParams) -> tuple[float, np.ndarray]:
    """Bounds valid for every stable schedule.

    The avenue queue at node 1 accumulates over the non-green time
    ``R_1 + Y + O``, so it is bounded through the red-side term of
    ``split_bounds``; each cross queue accumulates over ``G_n + Y + O``
    and uses the green-side term.
    """
    lam0 = params.lam0
    phi1 = lam0 / (2 * (1 - lam0)) * split_bounds(params, 0).red_term
    psi = np.array(
        [
            lam_n / (2 * (1 - lam_n)) * split_bounds(params, n).green_term
            for n, lam_n in enumerate(params.lam)
        ]
    )
    return phi1, psi


def queue_lower_bounds(params: FluidParams, schedule: Schedule) -> QueueLowerBounds:
    lam0, lam, yo, U = params.lam0, params.lam_array(), params.yo, schedule.U
    phi1 = lam0 * (schedule.R[0] + yo) ** 2 / (2 * (1 - lam0) * U[0])
    psi = lam * (schedule.G + yo) ** 2 / (2 * (1 - lam) * U)
    phi1_free, psi_free = schedule_free_bounds(params)
    return QueueLowerBounds(phi1, psi, phi1_free, psi_free)


def desync_penalty(lam0: float, W: float, U: float) -> float:
    """Minimum average avenue queue at a node whose green lags upstream by ``W``."""
    return lam0 * W * W / (2 * (1 - lam0) * U)


def greenwave_timing(params: FluidParams, delta: float) -> tuple[float, float, float]:
    """Common green, red and cycle lengths ``G(delta), R(delta), U(delta)``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    lam0, lm, yo = params.lam0, params.lam_max, params.yo
    slack = 1.0 - lam0 - lm
    G = lam0 * (1 + delta) * yo / slack
    R = lm * (1 + delta) * yo / slack
    U = (1 + delta * (lam0 + lm)) * yo / slack
    return G, R, U


def greenwave_schedule(params: FluidParams, delta: float = 0.0) -> Schedule:
    G, R, _ = greenwave_timing(params, delta)
    return Schedule.for_params(params, G, R, offsets=0.0)


@dataclass
class GreenwaveDerived:
    delta: float
    G: float
    R: float
    U: float
    phi: np.ndarray  # long-run avenue queue per node; zero beyond node 1
    psi: np.ndarray  # long-run cross queue per node
    p: np.ndarray
    q: np.ndarray
    phi1_bound: float
    psi_bound: np.ndarray


def greenwave_averages(params: FluidParams, delta: float = 0.0) -> GreenwaveDerived:
    """Long-run averages under the synchronised greenwave schedule."""
    G, R, U = greenwave_timing(params, delta)
    lam0, lam, yo = params.lam0, params.lam_array(), params.yo
    phi = np.zeros(params.n)
    phi[0] = lam0 * (R + yo) ** 2 / (2 * (1 - lam0) * U)
    psi = lam * (G + yo) ** 2 / (2 * (1 - lam) * U)
    lem = [split_bounds(params, n) for n in range(params.n)]
    phi1_b, psi_b = schedule_free_bounds(params)
    return GreenwaveDerived(
        delta, G, R, U, phi, psi,
        np.array([b.p for b in lem]), np.array([b.q for b in lem]),
        phi1_b, psi_b,
    )


def in_tight_regime(params: FluidParams) -> bool:
    """Uniform cross rates with ``lam0 + 2 lam1 >= 1`` and ``2 lam0 + lam1 >= 1``.

    In this regime the greenwave averages at ``delta = 0`` coincide with
    the schedule-free bounds.
    """
    lam1 = params.lam[0]
    uniform = all(x == lam1 for x in params.lam)
    return uniform and params.lam0 + 2 * lam1 >= 1 and 2 * params.lam0 + lam1 >= 1


@dataclass
class OptimalityGap:
    phi1: float
    psi: np.ndarray


def optimality_gap(params: FluidParams, delta: float) -> OptimalityGap:
    """Relative excess of the greenwave averages at ``delta`` over ``delta = 0``."""
    base = greenwave_averages(params, 0.0)
    cur = greenwave_averages(params, delta)
    with np.errstate(invalid="ignore", divide="ignore"):
        psi = np.where(base.psi > 0, (cur.psi - base.psi) / base.psi, 0.0)
    phi1 = (cur.phi[0] - base.phi[0]) / base.phi[0] if base.phi[0] > 0 else 0.0
    return OptimalityGap(float(phi1), psi)


# -------------------------------------------------------------- simulator


@dataclass
class FluidTrajectory:
    times: np.ndarray  # (K,) breakpoints
    phi: np.ndarray  # (K, N) avenue queues
    psi: np.ndarray  # (K, N) cross queues
    phi_avg: np.ndarray
    psi_avg: np.ndarray
    windows: list  # per-node (start, end) of the averaging window

    def value_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        phi = np.array([np.interp(t, self.times, self.phi[:, n]) for n in range(self.phi.shape[1])])
        psi = np.array([np.interp(t, self.times, self.psi[:, n]) for n in range(self.psi.shape[1])])
        return phi, psi

    def integral(self, series: np.ndarray, a: float, b: float) -> float:
        """Exact integral of a piecewise-linear series over ``[a, b]``."""
        t = self.times
        x = series
        ya, yb = np.interp(a, t, x), np.interp(b, t, x)
        inside = (t > a) & (t < b)
        ts = np.concatenate([[a], t[inside], [b]])
        ys = np.concatenate([[ya], x[inside], [yb]])
        return float(np.sum(np.diff(ts) * (ys[1:] + ys[:-1]) / 2.0))

    def max_after(self, series: np.ndarray, t0: float) -> float:
        mask = self.times >= t0
        return float(series[mask].max()) if mask.any() else 0.0


class _Clock:
    """Tracks the current segment of one node's cycle and its next boundary."""

    def __init__(self, schedule: Schedule, n: int):
        self.edges = schedule.segment_edges(n)
        self.U = float(schedule.U[n])
        self.off = float(schedule.offsets[n])
        # cycle index k whose start off + k U is <= 0
        self.k = 0 if self.off == 0 else -1
        pos = -(self.off + self.k * self.U)
        self.seg = 0
        while self.seg < 3 and pos >= self.edges[self.seg + 1]:
            self.seg += 1
        self.next = self._boundary()

    def _boundary(self) -> float:
        return self.off + self.k * self.U + self.edges[self.seg + 1]

    def advance(self) -> None:
        self.seg += 1
        if self.seg == 4:
            self.seg = 0
            self.k += 1
        self.next = self._boundary()

    def cycle_starts(self, t0: float, t1: float) -> list[float]:
        k = math.ceil((t0 - self.off) / self.U - 1e-12)
        out = []
        while self.off + k * self.U <= t1 + 1e-9:
            out.append(self.off + k * self.U)
            k += 1
        return out


def simulate_fluid(
    params: FluidParams,
    schedule: Schedule,
    horizon: float | None = None,
    initial_phi=None,
    initial_psi=None,
    growth_tol: float = 1e-6,
) -> FluidTrajectory:
    """Event-driven integration of the fluid queues.

    Between events every queue moves linearly, so breakpoints are placed
    at phase boundaries and at the instants queues empty. Long-run
    averages are taken per node over a whole number of that node's cycles
    after discarding ``max(ceil(horizon / 10), 2 U_n)`` time units.

    Raises ``UnstableSchedule`` when a queue, sampled at the node's cycle
    starts within the averaging window, grows at every cycle by more than
    ``growth_tol`` in total.
    """
    if schedule.n != params.n:
        raise InvalidParams("schedule and parameters disagree on the number of nodes")
    if schedule.Y != params.Y or schedule.O != params.O:
        raise InvalidParams("schedule and parameters disagree on yellow/orange durations")
    N = params.n
    Umax = float(schedule.U.max())
    if horizon is None:
        horizon = 60.0 * Umax
    if horizon < 4 * Umax:
        raise ValueError("horizon must cover several cycles")

    lam0 = params.lam0
    lam = list(params.lam)
    phi = [0.0] * N if initial_phi is None else [float(v) for v in initial_phi]
    psi = [0.0] * N if initial_psi is None else [float(v) for v in initial_psi]
    clocks = [_Clock(schedule, n) for n in range(N)]
    eps = 1e-12 * max(1.0, horizon)

    times = [0.0]
    rec_phi = [phi.copy()]
    rec_psi = [psi.copy()]
    t = 0.0
    while t < horizon:
        dphi = [0.0] * N
        dpsi = [0.0] * N
        inflow = lam0
        for n in range(N):
            seg = clocks[n].seg
            if seg == GREEN_SEG:
                out = 1.0 if phi[n] > 0.0 else inflow
            else:
                out = 0.0
            dphi[n] = inflow - out
            inflow = out
            if seg == RED_SEG:
                dpsi[n] = lam[n] - 1.0 if psi[n] > 0.0 else 0.0
            else:
                dpsi[n] = lam[n]
        t_next = min(horizon, min(c.next for c in clocks))
        for n in range(N):
            if dphi[n] < 0.0:
                t_next = min(t_next, t + phi[n] / -dphi[n])
            if dpsi[n] < 0.0:
                t_next = min(t_next, t + psi[n] / -dpsi[n])
        dt = t_next - t
        for n in range(N):
            phi[n] += dphi[n] * dt
            psi[n] += dpsi[n] * dt
            # snap queues that emptied at this event
            if dphi[n] < 0.0 and phi[n] <= -dphi[n] * eps:
                phi[n] = 0.0
            if dpsi[n] < 0.0 and psi[n] <= -dpsi[n] * eps:
                psi[n] = 0.0
        t = t_next
        for c in clocks:
            while c.next <= t + eps:
                c.advance()
        times.append(t)
        rec_phi.append(phi.copy())
        rec_psi.append(psi.copy())

    traj = FluidTrajectory(
        np.array(times), np.array(rec_phi), np.array(rec_psi),
        np.zeros(N), np.zeros(N), [],
    )
    cut_base = math.ceil(horizon / 10.0)
    for n, c in enumerate(clocks):
        cut = max(cut_base, 2 * c.U)
        starts = c.cycle_starts(cut, horizon)
        if len(starts) < 2:
            raise ValueError("horizon too short to average over a whole cycle")
        a, b = starts[0], starts[-1]
        traj.windows.append((a, b))
        span = b - a
        traj.phi_avg[n] = traj.integral(traj.phi[:, n], a, b) / span
        traj.psi_avg[n] = traj.integral(traj.psi[:, n], a, b) / span
        for series, name in ((traj.phi[:, n], "avenue"), (traj.psi[:, n], "cross")):
            samples = np.interp(starts, traj.times, series)
            steps = np.diff(samples)
            if len(steps) and (steps > 0).all() and samples[-1] - samples[0] > growth_tol:
                raise UnstableSchedule(
                    f"{name} queue at node {n} grows every cycle "
                    f"({samples[0]:.4g} -> {samples[-1]:.4g})"
                )
    return traj


def random_stable_schedule(
    params: FluidParams, rng: np.random.Generator, common_cycle: bool = False, max_slack: float = 1.0
) -> Schedule:
    """Random green/red lengths meeting both stability conditions, with random offsets.

    Each cycle is ``s`` times the shortest feasible one, ``s ~ U[1, 1 + max_slack]``.
    The spare time beyond ``lam0 U`` of green and ``lam_n U`` of red is split at
    random. With ``common_cycle`` all nodes share one cycle length.
    """
    N, yo, lam0 = params.n, params.yo, params.lam0
    lam = params.lam_array()
    slack = 1.0 - lam0 - lam
    if common_cycle:
        U = np.full(N, (yo / slack).max() * rng.uniform(1.0, 1.0 + max_slack))
    else:
        U = yo / slack * rng.uniform(1.0, 1.0 + max_slack, N)
    spare = np.maximum(U * slack - yo, 0.0)
    u = rng.uniform(0.0, 1.0, N)
    G = lam0 * U + u * spare
    R = lam * U + (1.0 - u) * spare
    offsets = rng.uniform(0.0, 1.0, N) * U
    return Schedule.for_params(params, G, R, offsets)


# ------------------------------------------------------------------ export

SWEEP_COLUMNS = (
    "lam0", "lam_max", "Y", "O", "delta", "node",
    "phi_closed", "phi_sim", "psi_closed", "psi_sim", "phi_gap", "psi_gap",
)


def fluid_sweep(params: FluidParams, deltas, horizon_cycles: float = 60.0) -> list[dict]:
    rows = []
    for d in deltas:
        gw = greenwave_averages(params, d)
        sched = greenwave_schedule(params, d)
        sim = simulate_fluid(params, sched, horizon_cycles * gw.U)
        gap = optimality_gap(params, d)
        for n in range(params.n):
            rows.append(
                {
                    "lam0": params.lam0, "lam_max": params.lam_max, "Y": params.Y, "O": params.O,
                    "delta": float(d), "node": n,
                    "phi_closed": float(gw.phi[n]), "phi_sim": float(sim.phi_avg[n]),
                    "psi_closed": float(gw.psi[n]), "psi_sim": float(sim.psi_avg[n]),
                    "phi_gap": gap.phi1 if n == 0 else 0.0, "psi_gap": float(gap.psi[n]),
                }
            )
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_breakpoints_csv(traj: FluidTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "phi", "psi"])
        for k, t in enumerate(traj.times):
            for n in range(traj.phi.shape[1]):
                w.writerow([repr(float(t)), n, repr(float(traj.phi[k, n])), repr(float(traj.psi[k, n]))])
