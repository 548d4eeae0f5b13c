"""Foresighted action selection for a single EFT agent.

Each step the EFT agent (agent 0) predicts the actions of the agents it can
observe from their characters, advances a copy of the world one step with
its own action nulled (zero acceleration, no lane change), and acts on the
re-rendered observation of that imagined world.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import env as envmod
from .env import EnvConfig, WorldState
from .inference import InferenceConfig, TrajectoryRecord, infer_character
from .numerics import SeededRng
from .policy import HybridAction, PolicyBundle, RolloutLog, act, act_batch, rollout

EGO = 0


class AgentMode(str, Enum):
    PROPOSED = "proposed"
    FCE_EFT = "fce_eft"
    WITHOUT_EFT = "without_eft"


class ContractViolation(ValueError):
    pass


@dataclass
class SimulatedObservation:
    obs: np.ndarray
    provenance: str = "simulated"


def observable_targets(state: WorldState, ego: int, cfg: EnvConfig) -> list[int]:
    """Agents on the ego's lane or an adjacent lane within ``obs_radius`` of arc distance."""
    p = state.positions
    d = np.abs(p - p[ego])
    d = np.minimum(d, cfg.circumference - d)
    near = (np.abs(state.lanes - state.lanes[ego]) <= 1) & (d <= cfg.obs_radius)
    near[ego] = False
    return [int(j) for j in np.flatnonzero(near)]


def predict_actions(policy: PolicyBundle, target_observations: dict, chars: dict) -> dict:
    """Deterministic policy action of every target under its (inferred) character."""
    if not target_observations:
        return {}
    missing = [j for j in target_observations if j not in chars]
    if missing:
        raise ContractViolation(f"no character for observable targets {missing}")
    ids = sorted(target_observations)
    obs = np.array([target_observations[j] for j in ids])
    cs = np.array([chars[j] for j in ids], dtype=np.float64)
    a_c, proto, a_d = act_batch(policy, obs, cs)
    return {j: HybridAction(float(a_c[k]), float(proto[k]), int(a_d[k])) for k, j in enumerate(ids)}


def simulate_next_observation(state: WorldState, ego: int, predicted: dict, cfg: EnvConfig) -> SimulatedObservation:
    """One kinematic step with predicted target actions and a null ego action.

    Agents outside the prediction set keep their velocity and lane.
    """
    expected = set(observable_targets(state, ego, cfg))
    if set(predicted) != expected:
        raise ContractViolation(
            f"predictions for {sorted(predicted)} but observable targets are {sorted(expected)}")
    n = state.n_agents
    accel = np.zeros(n)
    lane_change = np.zeros(n, dtype=np.int64)
    for j, a in predicted.items():
        accel[j] = a.a_c
        lane_change[j] = a.a_d
    imagined, _ = envmod.step_arrays(state, accel, lane_change, cfg)
    return SimulatedObservation(envmod.observe_all(imagined, cfg)[ego])


def foresight_select(policy: PolicyBundle, o_hat: SimulatedObservation, c_i) -> HybridAction:
    return act(policy, o_hat.obs, c_i)


@dataclass
class EpisodeResult:
    log: RolloutLog
    simulated_obs: np.ndarray | None  # (steps, 14) for the EFT agent, None without EFT

    @property
    def reward_totals(self) -> np.ndarray:
        return self.log.rewards.sum(axis=0)

    @property
    def mean_reward(self) -> float:
        return self.log.mean_reward


def complete_character_map(inferred: dict | None, n_agents: int, ego: int, default) -> dict:
    out = {} if inferred is None else {int(k): np.asarray(v, dtype=np.float64) for k, v in inferred.items()}
    for j in range(n_agents):
        if j != ego and j not in out:
            out[j] = np.asarray(default, dtype=np.float64)
    return out


def run_episode(policy: PolicyBundle, env_cfg: EnvConfig, mode: AgentMode | str, characters,
                inferred: dict | None, rng: SeededRng, steps: int,
                state: WorldState | None = None) -> EpisodeResult:
    """Episode with agent 0 as the only EFT-capable agent.

    Every other agent acts greedily under its true character. The EFT agent
    uses ``inferred`` characters (``proposed``), its own character for
    everybody (``fce_eft``), or no foresight at all (``without_eft``).
    Targets missing from ``inferred`` fall back to the middle of the
    character space.
    """
    mode = AgentMode(mode)
    if mode is AgentMode.WITHOUT_EFT:
        return EpisodeResult(rollout(policy, env_cfg, characters, rng, steps, state=state), None)

    chars = np.asarray(characters, dtype=np.float64)
    n = env_cfg.n_agents
    c_ego = chars[EGO]
    if mode is AgentMode.FCE_EFT:
        hat = {j: c_ego for j in range(n) if j != EGO}
    else:
        hat = complete_character_map(inferred, n, EGO, policy.train_config.character_space.midpoint)
    hat_matrix = chars.copy()
    for j, c in hat.items():
        hat_matrix[j] = c

    if state is None:
        state = envmod.reset(rng.spawn(0), env_cfg)
    fS = envmod.SLOTS.index("fS")
    rows = {k: [] for k in ("obs", "a_c", "a_d", "rewards", "terms", "infeasible", "velocities", "lanes", "gap", "sim")}
    table = envmod.neighbor_table(state, env_cfg)
    for _ in range(steps):
        obs = envmod.observe_all(state, env_cfg, table)
        a_c, _, a_d = act_batch(policy, obs, chars)
        # one batch with inferred characters keeps predictions bitwise equal
        # to executed actions whenever the inferred character is exact
        p_c, p_proto, p_d = act_batch(policy, obs, hat_matrix)
        targets = observable_targets(state, EGO, env_cfg)
        predicted = {j: HybridAction(float(p_c[j]), float(p_proto[j]), int(p_d[j])) for j in targets}
        o_hat = simulate_next_observation(state, EGO, predicted, env_cfg)
        ego_action = foresight_select(policy, o_hat, c_ego)
        a_c = a_c.copy()
        a_d = a_d.copy()
        a_c[EGO], a_d[EGO] = ego_action.a_c, ego_action.a_d
        nxt, infeasible = envmod.step_arrays(state, a_c, a_d, env_cfg)
        next_table = envmod.neighbor_table(nxt, env_cfg)
        terms = envmod.reward_terms(state, a_d, nxt, infeasible, env_cfg, (table, next_table))
        rows["obs"].append(obs)
        rows["a_c"].append(a_c)
        rows["a_d"].append(a_d)
        rows["rewards"].append(envmod.total_reward(terms, chars))
        rows["terms"].append(np.stack(terms))
        rows["infeasible"].append(infeasible)
        rows["velocities"].append(nxt.velocities)
        rows["lanes"].append(nxt.lanes)
        rows["gap"].append(np.minimum(next_table[1][:, fS], env_cfg.obs_radius))
        rows["sim"].append(o_hat.obs)
        state, table = nxt, next_table
    log = RolloutLog(*(np.array(rows[k]) for k in
                       ("obs", "a_c", "a_d", "rewards", "terms", "infeasible", "velocities", "lanes", "gap")))
    return EpisodeResult(log, np.array(rows["sim"]))


def observe_and_infer(policy: PolicyBundle, env_cfg: EnvConfig, characters, rng: SeededRng, steps: int,
                      inf_cfg: InferenceConfig, ego: int = EGO) -> dict:
    """Observer phase: watch one greedy episode, then infer every other agent's character.

    Inference starts from the ego's own character, so an agent that really
    shares it is left exactly there.
    """
    chars = np.asarray(characters, dtype=np.float64)
    log = rollout(policy, env_cfg, chars, rng, steps)
    out = {}
    for j in range(env_cfg.n_agents):
        if j == ego:
            continue
        traj = TrajectoryRecord(log.obs[:, j], log.a_c[:, j], log.a_d[:, j])
        out[j] = infer_character(policy, traj, chars[ego], inf_cfg).c_hat
    return out


EPISODE_COLUMNS = (["step", "agent"] + [f"o_{k}" for k in range(1, envmod.OBS_DIM + 1)]
                   + ["a_c", "a_d", "r1", "r2", "r3", "r_fail", "total"])


def write_episode_csv(result: EpisodeResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log = result.log
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        steps, n = log.a_c.shape
        for t in range(steps):
            for i in range(n):
                w.writerow([t, i, *(repr(float(v)) for v in log.obs[t, i]), repr(float(log.a_c[t, i])),
                            int(log.a_d[t, i]), *(repr(float(log.terms[t, k, i])) for k in range(4)),
                            repr(float(log.rewards[t, i]))])
    return path
