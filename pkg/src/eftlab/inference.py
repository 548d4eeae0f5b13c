"""Character inference from observation-action trajectories.

The character of a target agent is estimated by minimizing the trajectory
loss (negative log-likelihood up to constants) of its executed actions under
the shared multi-character actor, by projected gradient steps on the
character input.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import OBS_DIM, CharacterSpace
from .numerics import AdamState, SeededRng, adam_step, backward, forward_cache
from .policy import PolicyBundle, accel_from_unit, actor_inputs, post_process, rollout


class InferenceError(RuntimeError):
    pass


@dataclass
class TrajectoryRecord:
    observations: np.ndarray  # (T, 14) as seen by the target
    accel: np.ndarray         # (T,) executed continuous action
    lane_change: np.ndarray   # (T,) executed integer lane change

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64)
        self.lane_change = np.asarray(self.lane_change, dtype=np.int64)
        T = len(self.accel)
        if T < 1:
            raise ValueError("trajectory must contain at least one step")
        if self.observations.shape != (T, OBS_DIM) or self.lane_change.shape != (T,):
            raise ValueError(
                f"inconsistent trajectory shapes {self.observations.shape}, {self.accel.shape}, "
                f"{self.lane_change.shape}"
            )

    def __len__(self):
        return len(self.accel)

    def head(self, T: int) -> "TrajectoryRecord":
        return TrajectoryRecord(self.observations[:T], self.accel[:T], self.lane_change[:T])


@dataclass(frozen=True)
class InferenceConfig:
    """Settings of the projected descent on the character.

    ``optimizer="gauss_newton"`` (default) scales the gradient by the inverse
    of a damped, reweighted Gauss-Newton matrix of the absolute-residual loss
    and only accepts steps that lower the loss; ``learning_rate`` multiplies
    that step. ``"adam"`` preconditions the gradient per component and
    ``"sgd"`` is the plain ``c - lr * grad`` step; for both, the step size is
    multiplied by ``lr_decay`` whenever the loss rises. Residuals smaller than
    ``zero_tol`` count as exact matches.

    With ``restarts > 0`` the descent is repeated from the ``restarts``
    lowest-loss points of a grid with ``screen_levels`` cell centres per
    component, and the run with the lowest final loss wins (the run from
    ``c_init`` on ties). All runs share the ``max_iterations`` budget.
    """

    learning_rate: float = 1.0
    max_iterations: int = 500
    convergence_tol: float = 5e-4
    sigma_pi: float = 1.0
    optimizer: str = "gauss_newton"
    lr_decay: float = 1.0
    zero_tol: float = 1e-9
    damping: float = 1e-3
    max_damping: float = 1e8
    residual_floor: float = 1e-6
    # trust radius: largest per-component change of one Gauss-Newton step
    max_step: float = math.inf
    # retry a rejected step against the loss with the lane-change mismatch set frozen
    cross_discrete_walls: bool = True
    restarts: int = 3
    screen_levels: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0 or self.convergence_tol <= 0:
            raise ValueError("learning_rate and convergence_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.optimizer not in ("gauss_newton", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.sigma_pi <= 0 or self.damping <= 0 or self.residual_floor <= 0 or self.max_step <= 0:
            raise ValueError("sigma_pi, damping, residual_floor and max_step must be positive")
        if self.restarts < 0 or self.screen_levels < 1:
            raise ValueError("restarts must be >= 0 and screen_levels >= 1")


@dataclass
class InferenceResult:
    c_hat: np.ndarray
    loss_curve: list[float]
    iterations_used: int
    converged: bool
    path: list[np.ndarray] = field(default_factory=list, repr=False)
    # every descent in run order (the selected one included); starts[0] is c_init
    runs: list["InferenceResult"] = field(default_factory=list, repr=False)
    starts: list[np.ndarray] = field(default_factory=list, repr=False)
    selected: int = 0

    @property
    def total_iterations(self) -> int:
        return sum(r.iterations_used for r in self.runs) if self.runs else self.iterations_used


@dataclass
class _Residuals:
    accel: np.ndarray        # (T,) a_c(o; c) - a*_c, deadzoned
    accel_jac: np.ndarray    # (T, K)
    proto: np.ndarray        # (T,) proto(o; c) - a*_d
    proto_jac: np.ndarray    # (T, K)
    miss: np.ndarray         # (T,) quantized lane change differs from the executed one


def _check_character(policy: PolicyBundle, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (policy.char_dim,):
        raise ValueError(f"character has shape {c.shape}, expected ({policy.char_dim},)")
    return c


def _residuals(policy: PolicyBundle, traj: TrajectoryRecord, c, zero_tol: float, jacobian: bool = True):
    cfg = policy.env_config
    W = cfg.lane_change_width
    x = actor_inputs(traj.observations, c)
    cache = forward_cache(policy.actor, x)
    u = cache[-1]
    resid = accel_from_unit(u[:, 0], cfg) - traj.accel
    resid = np.where(np.abs(resid) <= zero_tol, 0.0, resid)
    proto = W * u[:, 1]
    miss = post_process(proto, W) != traj.lane_change
    jac = [None, None]
    if jacobian:
        scale = (0.5 * (cfg.a_max - cfg.a_min), W)
        for k in range(2):
            g = np.zeros_like(u)
            g[:, k] = scale[k]
            jac[k] = backward(policy.actor, x, g, cache=cache)[1][:, OBS_DIM:]
    return _Residuals(resid, jac[0], proto - traj.lane_change, jac[1], miss)


def _loss_from(res: _Residuals, k_c: float, miss=None) -> float:
    miss = res.miss if miss is None else miss
    return float(np.mean(k_c * np.abs(res.accel) + miss * np.abs(res.proto)))


def trajectory_loss(policy: PolicyBundle, traj: TrajectoryRecord, c, sigma_pi: float = 1.0,
                    zero_tol: float = 1e-9):
    """Mean per-step loss and its exact gradient w.r.t. the character.

    Per step: ``|a_c(o; c) - a*_c| / (2 pi sigma^2)`` plus, when the quantized
    lane change differs from the executed one, ``|a*_d - proto(o; c)|``. The
    indicator is held constant when differentiating.
    """
    cfg = policy.env_config
    W = cfg.lane_change_width
    c = _check_character(policy, c)
    T = len(traj)
    x = actor_inputs(traj.observations, c)
    cache = forward_cache(policy.actor, x)
    u = cache[-1]
    a_c = accel_from_unit(u[:, 0], cfg)
    proto = W * u[:, 1]
    resid = a_c - traj.accel
    resid = np.where(np.abs(resid) <= zero_tol, 0.0, resid)
    k_c = 1.0 / (2.0 * math.pi * sigma_pi**2)
    miss = post_process(proto, W) != traj.lane_change
    d_err = traj.lane_change - proto
    loss = float(np.mean(k_c * np.abs(resid) + miss * np.abs(d_err)))
    g_u = np.empty_like(u)
    g_u[:, 0] = k_c * np.sign(resid) * 0.5 * (cfg.a_max - cfg.a_min) / T
    g_u[:, 1] = -miss.astype(np.float64) * np.sign(d_err) * W / T
    _, g_x = backward(policy.actor, x, g_u, cache=cache)
    return loss, g_x[:, OBS_DIM:].sum(axis=0)


def _gauss_newton_step(policy, traj, c, res: _Residuals, loss: float, cfg: InferenceConfig,
                       space: CharacterSpace, damping: float, frozen: bool):
    """Damped reweighted Gauss-Newton step; returns ``(c_new, damping_used)`` or None.

    Each residual ``r`` is weighted by ``1 / |r|`` so the quadratic model
    touches the absolute-value loss at the current point. The damping grows
    tenfold until a candidate lowers the loss (or the mismatch-frozen loss
    when ``frozen``).
    """
    k_c = 1.0 / (2.0 * math.pi * cfg.sigma_pi**2)
    w_c = k_c / np.maximum(np.abs(res.accel), cfg.residual_floor)
    w_d = res.miss / np.maximum(np.abs(res.proto), cfg.residual_floor)
    H = (res.accel_jac * w_c[:, None]).T @ res.accel_jac + (res.proto_jac * w_d[:, None]).T @ res.proto_jac
    g = res.accel_jac.T @ (w_c * res.accel) + res.proto_jac.T @ (w_d * res.proto)
    # components pinned at a bound with descent pointing outward stay fixed
    low, high = np.asarray(space.low), np.asarray(space.high)
    free = ~(((c <= low) & (g > 0)) | ((c >= high) & (g < 0)))
    if not np.any(g[free]):
        return None
    Hf = H[np.ix_(free, free)]
    diag = np.diag(np.diag(Hf)) + 1e-12 * np.eye(int(free.sum()))
    while damping <= cfg.max_damping:
        step = np.zeros_like(c)
        step[free] = np.linalg.solve(Hf + damping * diag, -g[free])
        longest = np.max(np.abs(step))
        if longest > cfg.max_step:
            step *= cfg.max_step / longest
        cand = space.project(c + cfg.learning_rate * step)
        if frozen:
            new_loss = _loss_from(_residuals(policy, traj, cand, cfg.zero_tol, jacobian=False), k_c, res.miss)
        else:
            new_loss = trajectory_loss(policy, traj, cand, cfg.sigma_pi, cfg.zero_tol)[0]
        if new_loss < loss:
            return cand, damping
        damping *= 10.0
    return None


def screening_grid(space: CharacterSpace, levels: int) -> np.ndarray:
    """Cell centres of a ``levels``-per-component grid over the character space, row-major."""
    axes = [lo + w * (np.arange(levels) + 0.5) / levels for lo, w in zip(space.low, space.width)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def infer_character(policy: PolicyBundle, traj: TrajectoryRecord, c_init, cfg: InferenceConfig,
                    space: CharacterSpace | None = None) -> InferenceResult:
    """Projected descent on the trajectory loss from ``c_init``, plus screened restarts.

    Each descent stops when the L1 change between successive iterates is at
    most ``convergence_tol`` or when the shared ``max_iterations`` budget is
    spent. The returned ``c_hat``, ``loss_curve`` and ``path`` are those of
    the selected run.
    """
    space = space or policy.train_config.character_space
    if not space.contains(c_init):
        raise ValueError(f"initial character {c_init} outside the character space")
    c_init = _check_character(policy, np.array(c_init, dtype=np.float64))
    starts = [c_init]
    if cfg.restarts:
        grid = screening_grid(space, cfg.screen_levels)
        screen = [trajectory_loss(policy, traj, g, cfg.sigma_pi, cfg.zero_tol)[0] for g in grid]
        starts += [grid[i] for i in np.argsort(screen, kind="stable")[: cfg.restarts]]
    runs = []
    budget = cfg.max_iterations
    for start in starts:
        if budget == 0:
            break
        runs.append(_descend(policy, traj, start, cfg, space, budget))
        budget -= runs[-1].iterations_used
    best = min(range(len(runs)), key=lambda i: (runs[i].loss_curve[-1], i))
    sel = runs[best]
    return InferenceResult(sel.c_hat, sel.loss_curve, sel.iterations_used, sel.converged, sel.path,
                           runs, starts[: len(runs)], best)


def _descend(policy, traj, c, cfg: InferenceConfig, space: CharacterSpace, budget: int) -> InferenceResult:
    c = c.copy()
    k_c = 1.0 / (2.0 * math.pi * cfg.sigma_pi**2)
    lr = cfg.learning_rate
    adam = AdamState.for_params([c], lr) if cfg.optimizer == "adam" else None
    damping = cfg.damping
    losses: list[float] = []
    path: list[np.ndarray] = []
    converged = False
    for _ in range(budget):
        if cfg.optimizer == "gauss_newton":
            res = _residuals(policy, traj, c, cfg.zero_tol)
            loss = _loss_from(res, k_c)
            grad = res.accel_jac.T @ (k_c * np.sign(res.accel)) + res.proto_jac.T @ (res.miss * np.sign(res.proto))
        else:
            loss, grad = trajectory_loss(policy, traj, c, cfg.sigma_pi, cfg.zero_tol)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise InferenceError(f"non-finite loss {loss} at c={c.tolist()}")
        if cfg.optimizer != "gauss_newton" and losses and loss > losses[-1]:
            lr *= cfg.lr_decay
        losses.append(loss)
        if cfg.optimizer == "gauss_newton":
            found = _gauss_newton_step(policy, traj, c, res, loss, cfg, space, damping, frozen=False)
            if found is None and cfg.cross_discrete_walls and res.miss.any():
                found = _gauss_newton_step(policy, traj, c, res, loss, cfg, space, cfg.damping, frozen=True)
            if found is None:
                c_new = c.copy()
            else:
                c_new, used = found
                damping = max(used / 10.0, 1e-9)
        elif adam is None:
            c_new = space.project(c - lr * grad)
        else:
            c_new = c.copy()
            adam.learning_rate = lr
            adam_step([c_new], [grad], adam)
            c_new = space.project(c_new)
        change = float(np.abs(c_new - c).sum())
        c = c_new
        path.append(c.copy())
        if change <= cfg.convergence_tol:
            converged = True
            break
    return InferenceResult(c, losses, len(losses), converged, path)


def add_trajectory_noise(traj: TrajectoryRecord, sigma: float, rng: SeededRng) -> TrajectoryRecord:
    """Gaussian noise on every observation component, clipped to [-1, 1]; actions untouched."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return TrajectoryRecord(traj.observations.copy(), traj.accel.copy(), traj.lane_change.copy())
    noisy = traj.observations + rng.normal(0.0, sigma, size=traj.observations.shape)
    return TrajectoryRecord(np.clip(noisy, -1.0, 1.0), traj.accel.copy(), traj.lane_change.copy())


def inference_metrics(c_hat, c_true, sigma: float, traj: TrajectoryRecord,
                      space: CharacterSpace | None = None) -> dict:
    """L1 error, range-normalized accuracy (percent) and observation SNR in dB.

    The SNR uses the mean squared observation of ``traj`` as signal power and
    is ``inf`` when ``sigma == 0``.
    """
    c_hat = np.asarray(c_hat, dtype=np.float64)
    c_true = np.asarray(c_true, dtype=np.float64)
    if c_hat.shape != c_true.shape:
        raise ValueError("character dimensions differ")
    space = space or CharacterSpace()
    err = np.abs(c_hat - c_true)
    acc = 100.0 * max(0.0, 1.0 - float(np.mean(err / space.width)))
    power = float(np.mean(traj.observations**2))
    snr = math.inf if sigma == 0 else 10.0 * math.log10(power / sigma**2)
    return {"l1": float(err.sum()), "acc_percent": acc, "snr_db": snr}


def planted_trajectory(policy: PolicyBundle, c_true, rng: SeededRng, length: int, target: int = 1,
                       other_chars=None) -> TrajectoryRecord:
    """Greedy multi-agent rollout in which agent ``target`` carries ``c_true``.

    Other agents draw their characters from the policy's character space
    unless ``other_chars`` is given. The target's observations and executed
    actions form the returned trajectory.
    """
    env_cfg = policy.env_config
    space = policy.train_config.character_space
    chars = space.sample(rng.spawn(7), env_cfg.n_agents) if other_chars is None else np.array(other_chars, float)
    chars[target] = c_true
    log = rollout(policy, env_cfg, chars, rng, length)
    return TrajectoryRecord(log.obs[:, target], log.a_c[:, target], log.a_d[:, target])


TRAJ_COLUMNS = ["t"] + [f"o_{k}" for k in range(1, OBS_DIM + 1)] + ["a_c", "a_d"]


def save_trajectory_csv(traj: TrajectoryRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_COLUMNS)
        for t in range(len(traj)):
            w.writerow([t, *(repr(float(v)) for v in traj.observations[t]),
                        repr(float(traj.accel[t])), int(traj.lane_change[t])])
    return path


def load_trajectory_csv(path) -> TrajectoryRecord:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJ_COLUMNS:
            raise ValueError(f"trajectory CSV header mismatch in {path}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"trajectory CSV {path} has no rows")
    data = np.array([[float(v) for v in r[1:OBS_DIM + 2]] for r in rows])
    return TrajectoryRecord(data[:, :OBS_DIM], data[:, OBS_DIM], np.array([int(r[-1]) for r in rows]))
