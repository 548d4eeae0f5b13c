"""Experiment commands. Each writes its CSVs plus a run manifest under ``<out>/<study>/``."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..eft import AgentMode, observe_and_infer, run_episode
from ..env import CharacterSpace
from ..inference import add_trajectory_noise, infer_character, inference_metrics, planted_trajectory
from ..numerics import SeededRng
from ..policy import PolicyBundle, load_checkpoint, rollout, save_checkpoint, train_policy
from .config import ExperimentConfig, group_assignment
from .records import RunManifest, write_csv

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"


def study_dir(cfg: ExperimentConfig, study: str, out=None) -> Path:
    return Path(out if out is not None else cfg.output_dir) / study


def default_checkpoint(cfg: ExperimentConfig, out=None) -> Path:
    return study_dir(cfg, "train", out) / CHECKPOINT_NAME


def _policy(checkpoint) -> tuple[PolicyBundle, str]:
    if isinstance(checkpoint, PolicyBundle):
        return checkpoint, "<in-memory>"
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run the train command first)")
    return load_checkpoint(path).bundle, str(path)


def cmd_train(cfg: ExperimentConfig, out=None, progress=None) -> dict:
    """Train the shared policy, then compare greedy and uniform-random rollouts on ``eval_seeds``."""
    d = study_dir(cfg, "train", out)
    manifest = RunManifest("train", cfg)
    res = train_policy(cfg.env, cfg.train, cfg.train_seed, progress)
    ckpt = save_checkpoint(res.checkpoint, d / CHECKPOINT_NAME)
    curve = write_csv(d / "curve.csv", ["episode", "mean_reward"], list(enumerate(res.curve)))
    rows = evaluation_rows(res.checkpoint.bundle, cfg)
    evaluation = write_csv(d / "evaluation.csv", ["seed", "policy", "mean_reward"], rows)
    manifest.checkpoints.append(ckpt)
    manifest.outputs += [curve, evaluation]
    manifest.write(d)
    return {"checkpoint": ckpt, "curve": curve, "evaluation": evaluation, "result": res}


def evaluation_rows(policy: PolicyBundle, cfg: ExperimentConfig) -> list:
    space = policy.train_config.character_space
    rows = []
    for seed in cfg.eval_seeds:
        rng = SeededRng(seed)
        chars = space.sample(rng.spawn(30), cfg.env.n_agents)
        for kind in ("greedy", "random"):
            lg = rollout(policy, cfg.env, chars, rng.spawn(31), cfg.episode_steps, policy=kind)
            rows.append((seed, kind, lg.mean_reward))
    return rows


def planted_case(policy: PolicyBundle, seed: int, length: int, c_true=None):
    """(true character, initial guess, trajectory) for one seed.

    Trajectories of different lengths under one seed are prefixes of each other.
    """
    rng = SeededRng(seed)
    space = policy.train_config.character_space
    c_true = space.sample(rng.spawn(1)) if c_true is None else np.asarray(c_true, dtype=np.float64)
    c0 = space.sample(rng.spawn(2))
    return c_true, c0, planted_trajectory(policy, c_true, rng.spawn(3), length)


INFERENCE_COLUMNS = ["T", "seed", "start", "selected", "iteration", "l1"]


def cmd_inference_study(cfg: ExperimentConfig, checkpoint, out=None) -> dict:
    """Per-iteration L1 distance to a planted character, for every trajectory length and seed.

    One block of rows per descent: ``start`` 0 is the random initial point,
    later starts are screened restarts, and ``selected`` marks the run whose
    estimate is reported. Iteration 0 is the start itself.
    """
    policy, ck = _policy(checkpoint)
    d = study_dir(cfg, "inference", out)
    manifest = RunManifest("inference", cfg, [ck])
    rows = []
    for T in cfg.inference_lengths:
        for seed in cfg.seeds:
            c_true, c0, traj = planted_case(policy, seed, T)
            res = infer_character(policy, traj, c0, cfg.inference)
            for k, (start, run) in enumerate(zip(res.starts, res.runs)):
                for it, c in enumerate([start, *run.path]):
                    rows.append((T, seed, k, int(k == res.selected), it, float(np.abs(c - c_true).sum())))
    path = write_csv(d / "inference.csv", INFERENCE_COLUMNS, rows)
    manifest.outputs.append(path)
    manifest.write(d)
    return {"inference": path, "rows": rows}


DIVERSITY_COLUMNS = ["n", "mode", "seed", "mean_reward", "ego_reward"]


def diversity_characters(space: CharacterSpace, n_agents: int, n: int, seed: int) -> np.ndarray:
    groups = space.sample(SeededRng(seed).spawn(10, n), n)
    return groups[group_assignment(n_agents, n)]


def cmd_diversity_ablation(cfg: ExperimentConfig, checkpoint, out=None) -> dict:
    """Mean reward of all agents per diversity level, mode and seed.

    Each seed draws one character per group, runs the observer phase and
    inference (only needed by ``proposed``) and then evaluates every mode on
    the same episode seed.
    """
    policy, ck = _policy(checkpoint)
    d = study_dir(cfg, "diversity", out)
    manifest = RunManifest("diversity", cfg, [ck])
    space = policy.train_config.character_space
    modes = [AgentMode(m) for m in cfg.modes]
    rows = []
    for n in cfg.diversity_levels:
        for seed in cfg.seeds:
            chars = diversity_characters(space, cfg.env.n_agents, n, seed)
            rng = SeededRng(seed)
            inferred = None
            if AgentMode.PROPOSED in modes:
                inferred = observe_and_infer(policy, cfg.env, chars, rng.spawn(11, n), cfg.observer_length,
                                             cfg.inference)
            for mode in modes:
                res = run_episode(policy, cfg.env, mode, chars, inferred, rng.spawn(12, n), cfg.episode_steps)
                rows.append((n, mode.value, seed, res.mean_reward, float(res.log.rewards[:, 0].mean())))
            log.info("diversity n=%d seed=%d done", n, seed)
    path = write_csv(d / "diversity.csv", DIVERSITY_COLUMNS, rows)
    manifest.outputs.append(path)
    manifest.write(d)
    return {"diversity": path, "rows": rows}


NOISE_COLUMNS = ["sigma", "seed", "acc", "l1", "snr_db"]


def cmd_noise_study(cfg: ExperimentConfig, checkpoint, out=None) -> dict:
    """Inference on noise-corrupted planted trajectories.

    Within a seed the same standard-normal draws are scaled by every sigma,
    and the SNR uses the clean trajectory's power.
    """
    policy, ck = _policy(checkpoint)
    d = study_dir(cfg, "noise", out)
    manifest = RunManifest("noise", cfg, [ck])
    space = policy.train_config.character_space
    rows = []
    for sigma in cfg.noise_sigmas:
        for seed in cfg.seeds:
            c_true, c0, traj = planted_case(policy, seed, cfg.noise_length)
            noisy = add_trajectory_noise(traj, sigma, SeededRng(seed).spawn(4))
            res = infer_character(policy, noisy, c0, cfg.inference)
            m = inference_metrics(res.c_hat, c_true, sigma, traj, space)
            rows.append((sigma, seed, m["acc_percent"], m["l1"], m["snr_db"]))
    path = write_csv(d / "noise.csv", NOISE_COLUMNS, rows)
    manifest.outputs.append(path)
    manifest.write(d)
    return {"noise": path, "rows": rows}


OOD_COLUMNS = ["case", "kind", "probe", "seed", "c_hat_1", "c_hat_2", "c_hat_3", "mean_c_hat", "abs_error"]


def cmd_ood_study(cfg: ExperimentConfig, out=None, checkpoints: dict | None = None, progress=None) -> dict:
    """Inference of characters outside (and inside) restricted training ranges.

    A policy is trained per case unless ``checkpoints`` maps the case name
    to a ready bundle or path. ``abs_error`` is the mean over components of
    the distance to the probe value.
    """
    d = study_dir(cfg, "ood", out)
    manifest = RunManifest("ood", cfg)
    rows = []
    checkpoints = checkpoints or {}
    for case in cfg.ood_cases:
        if case.name in checkpoints:
            policy, ck = _policy(checkpoints[case.name])
        else:
            space = replace(cfg.train.character_space, sample_ranges=case.train_ranges)
            res = train_policy(cfg.env, replace(cfg.train, character_space=space), cfg.train_seed, progress)
            policy = res.checkpoint.bundle
            ck = str(save_checkpoint(res.checkpoint, d / f"{case.name}_{CHECKPOINT_NAME}"))
        manifest.checkpoints.append(ck)
        probes = [("ood", p) for p in case.probe_values] + [("in_distribution", p) for p in case.in_distribution_values]
        for kind, p in probes:
            c_probe = np.full(policy.train_config.character_space.dim, float(p))
            for seed in cfg.seeds:
                _, c0, traj = planted_case(policy, seed, cfg.ood_length, c_probe)
                c_hat = infer_character(policy, traj, c0, cfg.inference).c_hat
                rows.append((case.name, kind, p, seed, *c_hat, float(c_hat.mean()),
                             float(np.abs(c_hat - c_probe).mean())))
    path = write_csv(d / "ood.csv", OOD_COLUMNS, rows)
    manifest.outputs.append(path)
    manifest.write(d)
    return {"ood": path, "rows": rows}


BEHAVIOR_COLUMNS = ["component", "value", "seed", "mean_velocity", "mean_follower_gap", "lane_changes"]


def cmd_behavior_study(cfg: ExperimentConfig, checkpoint, out=None) -> dict:
    """Sweep one character component of agent 0 with its other components at zero.

    The remaining agents keep characters drawn once per seed, and the
    episode seed is shared across the sweep. Statistics are agent 0's:
    mean velocity, mean gap to its follower and executed lane changes.
    """
    policy, ck = _policy(checkpoint)
    d = study_dir(cfg, "behavior", out)
    manifest = RunManifest("behavior", cfg, [ck])
    space = policy.train_config.character_space
    rows = []
    for k in range(space.dim):
        for value in cfg.behavior_values:
            for seed in cfg.seeds:
                rng = SeededRng(seed)
                chars = space.sample(rng.spawn(20), cfg.env.n_agents)
                chars[0] = 0.0
                chars[0, k] = value
                lg = rollout(policy, cfg.env, chars, rng.spawn(21), cfg.behavior_steps)
                changes = int(np.sum((lg.a_d[:, 0] != 0) & ~lg.infeasible[:, 0]))
                rows.append((k + 1, float(value), seed, float(lg.velocities[:, 0].mean()),
                             float(lg.follower_gap[:, 0].mean()), changes))
    path = write_csv(d / "behavior.csv", BEHAVIOR_COLUMNS, rows)
    manifest.outputs.append(path)
    manifest.write(d)
    return {"behavior": path, "rows": rows}
