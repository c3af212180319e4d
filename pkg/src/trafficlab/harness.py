"""Seeded experiment runner behind the command-line interface.

Every artifact is a function of ``(config, seed)``: arrivals, network
initialisation, exploration and random baselines draw from separate
named streams of the master seed.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from . import fluid
from .agents import DDPGAgent, DQNAgent, load_agent, save_agent, train_ddpg, train_dqn
from .baselines import make_policy
from .config import (
    ConfigInvalid, arrivals, ddpg_config, dqn_config, rates, stream_int,
)
from .env import make_env, parse_scenario, read_trajectory_csv, rollout, write_trajectory_csv
from .mdp import (
    TablePolicy, TruncatedSpace, build_transitions, extract_threshold_curve, policy_iteration,
    value_iteration, greedy_policy, bellman_residual, write_table_csv,
)
from .metrics import (
    average_queue_length, detect_greenwave, discounted_cost, synchrony_index, throughput,
)
from .nn import CheckpointIncompatible

COMMANDS = ("simulate", "solve-mdp", "train-dqn", "train-ddpg", "eval", "analyze-fluid",
            "detect-greenwave", "compare")


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _to_builtin(x):
    if isinstance(x, dict):
        return {str(k): _to_builtin(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_builtin(v) for v in x]
    if isinstance(x, np.ndarray):
        return _to_builtin(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


# --------------------------------------------------------------- policies


def solve_mdp(cfg: dict):
    """Exact policy and values for the single intersection described by ``cfg``."""
    a = arrivals(cfg)
    if a.kind != "bernoulli":
        raise ConfigInvalid("the exact solver supports Bernoulli arrivals only")
    m = cfg["mdp"]
    space = TruncatedSpace(int(m["x_max"]))
    model = build_transitions(space, a.avenue, a.cross, rates(cfg))
    gamma = float(cfg["gamma"])
    if not gamma < 1.0:
        raise ConfigInvalid("the exact solver needs gamma < 1")
    if m["method"] == "policy":
        pol, V = policy_iteration(model, gamma, max_iter=int(m["max_iter"]))
        sweeps = None
    else:
        V, sweeps = value_iteration(model, gamma, tol=float(m["tol"]))
        pol = greedy_policy(model, V, gamma)
    return space, model, pol, V, sweeps


def build_policy(cfg: dict, spec: dict, index: int = 0):
    name = spec["name"]
    params = dict(spec.get("params") or {})
    if name == "mdp":
        if parse_scenario(cfg["scenario"]) is not None:
            raise ConfigInvalid("the mdp policy is defined for the single intersection only")
        space, _, pol, _, _ = solve_mdp(cfg)
        return TablePolicy(space, pol)
    if name in ("dqn", "ddpg"):
        path = params.get("checkpoint") or cfg.get("checkpoint")
        if not path:
            raise ConfigInvalid(f"policy {name!r} needs a checkpoint path")
        agent = load_agent(path)
        expected = DQNAgent if name == "dqn" else DDPGAgent
        if not isinstance(agent, expected):
            raise CheckpointIncompatible(f"{path} does not hold a {name} agent")
        return agent.policy()
    try:
        return make_policy(name, params, seed=stream_int(cfg["seed"], "policy", index))
    except TypeError as e:
        raise ConfigInvalid(f"bad parameters for policy {name!r}: {e}") from e


# --------------------------------------------------------------- evaluate


def evaluate(cfg: dict, policy, episodes: int | None = None, horizon: int | None = None):
    """Roll out ``policy`` on paired evaluation seeds; returns trajectories and a summary."""
    episodes = episodes or cfg["episodes"]
    horizon = horizon or cfg["horizon"]
    env = make_env(cfg["scenario"], arrivals(cfg), rates(cfg))
    trajs = [rollout(env, policy, horizon, seed=stream_int(cfg["seed"], "env-eval", e))
             for e in range(episodes)]
    return trajs, summarize(cfg, trajs)


def summarize(cfg: dict, trajs) -> dict:
    gamma = float(cfg["gamma"])
    topo = parse_scenario(cfg["scenario"])
    out = {
        "episodes": len(trajs),
        "horizon": trajs[0].horizon,
        "avg_queue_length": float(np.mean([average_queue_length(t) for t in trajs])),
        "discounted_cost": float(np.mean([discounted_cost(t, gamma) for t in trajs])),
        "episode_rewards": [float(t.rewards.sum()) for t in trajs],
        "throughput": float(np.mean([throughput(t) for t in trajs])),
    }
    out["mean_reward"] = float(np.mean(out["episode_rewards"]))
    if topo is not None and topo.n >= 2:
        gw = cfg["greenwave"]
        reports = [
            detect_greenwave(t, topo.avenue_pairs(), int(gw["window"]), float(gw["threshold"]),
                             int(gw.get("max_lag", 10)))
            for t in trajs
        ]
        out["synchrony_index"] = float(np.mean([synchrony_index(t) for t in trajs]))
        out["greenwave"] = reports[0].to_dict()
        out["greenwave_fraction"] = float(np.mean([r.flag for r in reports]))
    return out


# --------------------------------------------------------------- commands


def _finish(out: Path, command: str, cfg: dict, metrics: dict) -> dict:
    report = _to_builtin({"command": command, "config": cfg, "metrics": metrics})
    write_json(report, out / "metrics.json")
    return report


def cmd_simulate(cfg, out: Path):
    policy = build_policy(cfg, cfg["policy"])
    trajs, metrics = evaluate(cfg, policy)
    write_trajectory_csv(trajs[0], out / "trajectory.csv")
    return metrics


def cmd_eval(cfg, out: Path):
    return cmd_simulate(cfg, out)


def cmd_solve_mdp(cfg, out: Path):
    space, model, pol, V, sweeps = solve_mdp(cfg)
    write_table_csv(out / "policy_table.csv", space, pol, V)
    gamma = float(cfg["gamma"])
    curves = {}
    for ph in (0, 2):
        c = extract_threshold_curve(pol, space, ph, x1_max=min(15, space.x_max),
                                    x2_max=min(15, space.x_max))
        curves[str(ph)] = {"thresholds": c.thresholds, "monotone": c.monotone}
    metrics = {
        "states": space.size,
        "method": cfg["mdp"]["method"],
        "sweeps": sweeps,
        "bellman_residual": bellman_residual(model, V, gamma),
        "value_empty": float(V[space.index(0, 0, 0)]),
        "switch_fraction": float(np.mean(pol)),
        "threshold_curves": curves,
    }
    trajs, ev = evaluate(cfg, TablePolicy(space, pol))
    write_trajectory_csv(trajs[0], out / "trajectory.csv")
    metrics["evaluation"] = ev
    return metrics


def cmd_train_dqn(cfg, out: Path):
    if parse_scenario(cfg["scenario"]) is not None:
        raise ConfigInvalid("train-dqn runs on the single intersection")
    seed = cfg["seed"]
    env = make_env(cfg["scenario"], arrivals(cfg), rates(cfg), seed=stream_int(seed, "env-train"))
    agent = DQNAgent(env.obs_dim, dqn_config(cfg), seed=stream_int(seed, "agent-init"))
    d = cfg["dqn"]
    log = train_dqn(env, agent, int(d["total_steps"]), int(d["episode_len"]),
                    seed=stream_int(seed, "explore"), log_path=out / "train_log.jsonl")
    save_agent(agent, out / "ckpt")
    trajs, metrics = evaluate(cfg, agent.policy())
    write_trajectory_csv(trajs[0], out / "trajectory.csv")
    metrics["training_episodes"] = len(log.episodes)
    return metrics


def cmd_train_ddpg(cfg, out: Path):
    topo = parse_scenario(cfg["scenario"])
    if topo is None:
        raise ConfigInvalid("train-ddpg runs on avenue or grid scenarios")
    seed = cfg["seed"]
    env = make_env(cfg["scenario"], arrivals(cfg), rates(cfg), seed=stream_int(seed, "env-train"))
    agent = DDPGAgent(env.obs_dim, topo.n, ddpg_config(cfg), seed=stream_int(seed, "agent-init"))
    d = cfg["ddpg"]
    log = train_ddpg(env, agent, int(d["total_steps"]), int(d["episode_len"]),
                     seed=stream_int(seed, "explore"), log_path=out / "train_log.jsonl")
    save_agent(agent, out / "ckpt")
    trajs, metrics = evaluate(cfg, agent.policy())
    write_trajectory_csv(trajs[0], out / "trajectory.csv")
    metrics["training_episodes"] = len(log.episodes)
    return metrics


def fluid_params(cfg) -> fluid.FluidParams:
    f = cfg["fluid"]
    try:
        return fluid.FluidParams(float(f["lam0"]), tuple(f["lam"]), float(f["Y"]), float(f["O"]))
    except fluid.InvalidParams as e:
        raise ConfigInvalid(str(e)) from e


def cmd_analyze_fluid(cfg, out: Path):
    params = fluid_params(cfg)
    f = cfg["fluid"]
    rows = fluid.fluid_sweep(params, f["deltas"], float(f.get("horizon_cycles", 60)))
    fluid.write_sweep_csv(rows, out / "fluid_sweep.csv")
    gw = fluid.greenwave_averages(params, 0.0)
    phi1_free, psi_free = fluid.schedule_free_bounds(params)
    sched = fluid.greenwave_schedule(params, 0.0)
    st = fluid.check_stability(params, sched)
    return {
        "greenwave": {"G": gw.G, "R": gw.R, "U": gw.U, "phi": gw.phi, "psi": gw.psi,
                      "p": gw.p, "q": gw.q},
        "schedule_free_bounds": {"phi1": phi1_free, "psi": psi_free},
        "tight_regime": fluid.in_tight_regime(params),
        "stability": {"avenue_margin": st.avenue_margin, "cross_margin": st.cross_margin,
                      "min_cycle": st.min_cycle},
        "gaps": {repr(float(d)): {"phi1": g.phi1, "psi": g.psi}
                 for d, g in ((d, fluid.optimality_gap(params, d)) for d in f["deltas"])},
        "max_abs_sim_error": max(
            max(abs(r["phi_closed"] - r["phi_sim"]), abs(r["psi_closed"] - r["psi_sim"])) for r in rows
        ),
    }


def cmd_detect_greenwave(cfg, out: Path):
    path = cfg.get("trajectory")
    if not path:
        raise ConfigInvalid("detect-greenwave needs a trajectory CSV (trajectory=PATH)")
    try:
        traj = read_trajectory_csv(path)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigInvalid(f"cannot read trajectory {path}: {e}") from e
    topo = parse_scenario(cfg["scenario"])
    if topo is None or topo.n != traj.phases.shape[1]:
        raise ConfigInvalid("scenario does not match the trajectory's intersections")
    gw = cfg["greenwave"]
    rep = detect_greenwave(traj, topo.avenue_pairs(), int(gw["window"]), float(gw["threshold"]),
                           int(gw.get("max_lag", 10)))
    return {"synchrony_index": synchrony_index(traj), **rep.to_dict(),
            "discounted_cost": discounted_cost(traj, float(cfg["gamma"]))}


def _label(spec: dict, i: int) -> str:
    raw = spec.get("label") or spec["name"]
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(raw)) or f"policy{i}"


def cmd_compare(cfg, out: Path):
    specs = cfg["compare"].get("policies") or []
    if len(specs) < 2:
        raise ConfigInvalid("compare needs at least two entries in compare.policies")
    results = {}
    for i, spec in enumerate(specs):
        label = _label(spec, i)
        if label in results:
            label = f"{label}_{i}"
        trajs, metrics = evaluate(cfg, build_policy(cfg, spec, i))
        write_trajectory_csv(trajs[0], out / f"trajectory_{label}.csv")
        results[label] = metrics
    ranking = sorted(results, key=lambda k: -results[k]["discounted_cost"])
    return {"policies": results, "ranking_by_discounted_cost": ranking}


HANDLERS = {
    "simulate": cmd_simulate,
    "solve-mdp": cmd_solve_mdp,
    "train-dqn": cmd_train_dqn,
    "train-ddpg": cmd_train_ddpg,
    "eval": cmd_eval,
    "analyze-fluid": cmd_analyze_fluid,
    "detect-greenwave": cmd_detect_greenwave,
    "compare": cmd_compare,
}


def run_experiment(cfg: dict, command: str = "simulate", out=None) -> dict:
    """Run one command and write ``metrics.json`` plus its artifacts under ``out``."""
    if command not in HANDLERS:
        raise ConfigInvalid(f"unknown command {command!r}")
    out = Path(out or "out")
    os.makedirs(out, exist_ok=True)
    metrics = HANDLERS[command](cfg, out)
    return _finish(out, command, cfg, metrics)
