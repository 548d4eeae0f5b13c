"""Multi-lane ring-road driving world with simultaneous moves.

Kinematics are first-order clamped Euler. Each agent observes the nearest
leading and following vehicle on its own lane and on the two adjacent lanes
within ``obs_radius``. Lane index ``k + 1`` is the left (inner) lane, so
``lane_change = +1`` moves left and ``-1`` moves right.

Observation layout (14 values, all in [-1, 1])::

    0       ego velocity            2 v / v_max - 1
    1..6    relative velocity       (v_j - v_i) / v_max   slots lL lS lR fL fS fR
    7..12   relative position       |gap| / obs_radius    slots lL lS lR fL fS fR
    13      lane index              2 k / (L - 1) - 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import SeededRng

OBS_DIM = 14
SLOTS = ("lL", "lS", "lR", "fL", "fS", "fR")
SLOT_DV = {name: 1 + k for k, name in enumerate(SLOTS)}
SLOT_DP = {name: 7 + k for k, name in enumerate(SLOTS)}
# (is_leader, lane offset) per slot, in SLOTS order
_SLOT_GEOMETRY = ((True, 1), (True, 0), (True, -1), (False, 1), (False, 0), (False, -1))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IdmParams:
    s0: float = 2.0
    t_star: float = 1.0
    a_min: float = -3.0
    a_max: float = 3.0


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 6
    lanes: int = 2
    circumference: float = 100.0
    dt: float = 1.0
    v_max: float = 7.0
    a_min: float = -3.0
    a_max: float = 3.0
    obs_radius: float = 50.0
    idm: IdmParams = field(default_factory=IdmParams)
    # scalar applies to every agent
    target_velocity: float | tuple[float, ...] = 3.5
    r_fail: float = -1.0
    lane_change_width: int = 1
    gap_floor_frac: float = 0.01
    min_separation: float = 1e-9

    def __post_init__(self):
        if self.n_agents < 1 or self.lanes < 1:
            raise ConfigError("n_agents and lanes must be positive")
        if not self.a_min < 0.0 < self.a_max:
            raise ConfigError("acceleration bounds must satisfy a_min < 0 < a_max")
        if self.idm.s0 <= 0.0:
            raise ConfigError("idm.s0 must be positive")
        if self.lane_change_width < 1:
            raise ConfigError("lane_change_width must be >= 1")
        if self.r_fail > 0.0:
            raise ConfigError("r_fail must be non-positive")
        if self.circumference <= 0.0 or self.dt <= 0.0 or self.v_max <= 0.0 or self.obs_radius <= 0.0:
            raise ConfigError("circumference, dt, v_max and obs_radius must be positive")
        v_star = self.target_velocities()
        if np.any(v_star <= 0.0):
            raise ConfigError("target velocity must be positive (R1 divides by it)")

    def target_velocities(self) -> np.ndarray:
        v = np.asarray(self.target_velocity, dtype=np.float64)
        if v.ndim == 0:
            return np.full(self.n_agents, float(v))
        if v.shape != (self.n_agents,):
            raise ConfigError(f"target_velocity needs {self.n_agents} entries, got {v.shape[0]}")
        return v


@dataclass(frozen=True)
class CharacterSpace:
    """Box of admissible characters plus the sub-intervals used for sampling.

    ``sample_ranges`` (applied to every component) restricts where training
    draws characters; ``None`` samples the whole box.
    """

    low: tuple[float, ...] = (0.0, 0.0, 0.0)
    high: tuple[float, ...] = (1.0, 1.0, 1.0)
    sample_ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if len(self.low) != len(self.high) or any(h <= l for l, h in zip(self.low, self.high)):
            raise ConfigError("character bounds must be non-empty intervals")
        if self.sample_ranges is not None:
            for lo, hi in self.sample_ranges:
                if hi < lo:
                    raise ConfigError(f"bad sampling interval [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.low) + np.asarray(self.high))

    @property
    def width(self) -> np.ndarray:
        return np.asarray(self.high) - np.asarray(self.low)

    def project(self, c) -> np.ndarray:
        return np.clip(np.asarray(c, dtype=np.float64), self.low, self.high)

    def contains(self, c) -> bool:
        c = np.asarray(c)
        return bool(np.all(c >= np.asarray(self.low)) and np.all(c <= np.asarray(self.high)))

    def sample(self, rng: SeededRng, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        if self.sample_ranges is None:
            return rng.uniform(np.asarray(self.low), np.asarray(self.high), size=shape)
        # uniform over the union of intervals, per component
        los = np.array([r[0] for r in self.sample_ranges])
        lengths = np.array([r[1] - r[0] for r in self.sample_ranges])
        u = rng.uniform(0.0, lengths.sum(), size=shape)
        edges = np.cumsum(lengths)
        idx = np.minimum(np.searchsorted(edges, u, side="right"), len(lengths) - 1)
        offset = u - (edges[idx] - lengths[idx])
        return los[idx] + offset


@dataclass(frozen=True)
class WorldState:
    positions: np.ndarray
    velocities: np.ndarray
    lanes: np.ndarray
    time_step: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.positions)

    def permuted(self, perm) -> "WorldState":
        perm = np.asarray(perm)
        return WorldState(self.positions[perm], self.velocities[perm], self.lanes[perm], self.time_step)


@dataclass
class RewardBreakdown:
    r1: float
    r2: float
    r3: float
    r_fail_applied: float
    total: float


def reset(rng: SeededRng, cfg: EnvConfig, max_attempts: int = 1000) -> WorldState:
    """Random collision-free placement; velocities uniform in [0, v*]."""
    n = cfg.n_agents
    s0 = cfg.idm.s0
    if cfg.lanes * math.floor(cfg.circumference / s0) < n:
        raise ConfigError(
            f"cannot place {n} agents on {cfg.lanes} lanes of {cfg.circumference} m with gap {s0} m"
        )
    positions = np.empty(n)
    lanes = np.empty(n, dtype=np.int64)
    for i in range(n):
        for _ in range(max_attempts):
            lane = int(rng.integers(0, cfg.lanes))
            pos = float(rng.uniform(0.0, cfg.circumference))
            same = lanes[:i] == lane
            if same.any():
                d = np.abs(positions[:i][same] - pos)
                d = np.minimum(d, cfg.circumference - d)
                if d.min() < s0:
                    continue
            positions[i], lanes[i] = pos, lane
            break
        else:
            raise ConfigError(f"could not place agent {i} after {max_attempts} attempts (density too high)")
    velocities = rng.uniform(0.0, 1.0, size=n) * cfg.target_velocities()
    return WorldState(positions, velocities, lanes, 0)


def neighbor_table(state: WorldState, cfg: EnvConfig):
    """Nearest neighbor per agent and slot.

    Returns ``(index, gap)`` arrays of shape ``(N, 6)`` in SLOTS order; missing
    neighbors have index -1 and gap ``inf``. Gaps are arc distances in meters.
    A vehicle exactly alongside counts as a leader at gap 0.
    """
    p, lanes = state.positions, state.lanes
    n = len(p)
    C = cfg.circumference
    fwd = np.mod(p[None, :] - p[:, None], C)  # fwd[i, j]: distance ahead of i to j
    bwd = np.mod(p[:, None] - p[None, :], C)
    lane_diff = lanes[None, :] - lanes[:, None]
    not_self = ~np.eye(n, dtype=bool)
    index = np.full((n, 6), -1, dtype=np.int64)
    gap = np.full((n, 6), np.inf)
    rows = np.arange(n)
    for s, (leader, offset) in enumerate(_SLOT_GEOMETRY):
        d = fwd if leader else bwd
        mask = not_self & (lane_diff == offset) & (d <= cfg.obs_radius)
        if not leader:
            mask &= d > 0.0
        dm = np.where(mask, d, np.inf)
        j = dm.argmin(axis=1)
        g = dm[rows, j]
        found = np.isfinite(g)
        index[found, s] = j[found]
        gap[found, s] = g[found]
    return index, gap


def observe_all(state: WorldState, cfg: EnvConfig, table=None) -> np.ndarray:
    index, gap = neighbor_table(state, cfg) if table is None else table
    v = state.velocities
    n = len(v)
    obs = np.empty((n, OBS_DIM))
    obs[:, 0] = 2.0 * v / cfg.v_max - 1.0
    found = index >= 0
    dv = np.where(found, v[np.maximum(index, 0)] - v[:, None], 0.0)
    obs[:, 1:7] = np.clip(dv / cfg.v_max, -1.0, 1.0)
    obs[:, 7:13] = np.where(found, np.clip(gap / cfg.obs_radius, 0.0, 1.0), 1.0)
    if cfg.lanes > 1:
        obs[:, 13] = 2.0 * state.lanes / (cfg.lanes - 1) - 1.0
    else:
        obs[:, 13] = 0.0
    return obs


def observe(state: WorldState, i: int, cfg: EnvConfig) -> np.ndarray:
    if not 0 <= i < state.n_agents:
        raise IndexError(f"agent {i} out of range")
    return observe_all(state, cfg)[i]


def step_arrays(state: WorldState, accel, lane_change, cfg: EnvConfig):
    """Simultaneous kinematic update. Returns ``(next_state, infeasible)``.

    A lane change is rejected when the target lane does not exist, or when
    another vehicle that is on the target lane, or is also moving onto it,
    ends the step within ``s0`` of the mover. The rule is symmetric so the
    update is equivariant under agent relabeling.
    """
    n = state.n_agents
    accel = np.asarray(accel, dtype=np.float64)
    lane_change = np.asarray(lane_change, dtype=np.int64)
    if accel.shape != (n,) or lane_change.shape != (n,):
        raise ValueError(f"expected {n} actions, got {accel.shape[0] if accel.ndim else 1}")
    tol = 1e-9
    if np.any(accel < cfg.a_min - tol) or np.any(accel > cfg.a_max + tol):
        raise ValueError("acceleration outside [a_min, a_max]")
    C = cfg.circumference
    v_next = np.clip(state.velocities + accel * cfg.dt, 0.0, cfg.v_max)
    p_next = np.mod(state.positions + v_next * cfg.dt, C)
    # float mod can return C for tiny negative inputs
    p_next = np.where(p_next >= C, p_next - C, p_next)
    target = state.lanes + lane_change
    moving = lane_change != 0
    infeasible = moving & ((target < 0) | (target >= cfg.lanes))
    candidates = moving & ~infeasible
    if candidates.any():
        d = np.abs(p_next[:, None] - p_next[None, :])
        d = np.minimum(d, C - d)
        close = (d <= cfg.idm.s0) & ~np.eye(n, dtype=bool)
        for i in np.flatnonzero(candidates):
            occupies = (state.lanes == target[i]) | (moving & (target == target[i]))
            if np.any(close[i] & occupies):
                infeasible[i] = True
    lanes_next = np.where(moving & ~infeasible, target, state.lanes)
    return WorldState(p_next, v_next, lanes_next, state.time_step + 1), infeasible


def step(state: WorldState, joint_actions, cfg: EnvConfig):
    """``step_arrays`` for a sequence of actions exposing ``a_c`` and ``a_d``."""
    if len(joint_actions) != state.n_agents:
        raise ValueError(f"expected {state.n_agents} actions, got {len(joint_actions)}")
    accel = np.array([a.a_c for a in joint_actions], dtype=np.float64)
    lane_change = np.array([a.a_d for a in joint_actions], dtype=np.int64)
    return step_arrays(state, accel, lane_change, cfg)


def safety_distance(v_follower, dv_follower, cfg: EnvConfig):
    """IDM desired gap ``s0 + max(0, v (t* + dv / (2 sqrt|A_min A_max|)))`` in meters.

    ``dv_follower`` is the closing speed, follower minus leader.
    """
    idm = cfg.idm
    inner = np.asarray(v_follower) * (
        idm.t_star + np.asarray(dv_follower) / (2.0 * math.sqrt(abs(idm.a_min * idm.a_max)))
    )
    return idm.s0 + np.maximum(0.0, inner)


def reward_terms(state: WorldState, lane_change, next_state: WorldState, infeasible, cfg: EnvConfig,
                 tables=None):
    """Vectorized ``(r1, r2, r3, r_fail)`` for every agent.

    Distances in r2 and r3 are divided by ``obs_radius``; the follower gap in
    r2 is floored at ``gap_floor_frac`` (normalized) to keep r2 bounded.
    """
    tab_now, tab_next = tables if tables is not None else (
        neighbor_table(state, cfg), neighbor_table(next_state, cfg))
    rho = cfg.obs_radius
    v_star = cfg.target_velocities()
    v_next = next_state.velocities
    r1 = 1.0 - np.abs(v_next - v_star) / v_star

    f_idx = tab_next[0][:, SLOTS.index("fS")]
    f_gap = tab_next[1][:, SLOTS.index("fS")]
    has_f = f_idx >= 0
    v_f = np.where(has_f, v_next[np.maximum(f_idx, 0)], 0.0)
    s_star = safety_distance(v_f, v_f - v_next, cfg) / rho
    gap_n = np.maximum(np.where(has_f, f_gap / rho, 1.0), cfg.gap_floor_frac)
    r2 = np.where(has_f, np.minimum(0.0, 1.0 - (s_star / gap_n) ** 2), 0.0)

    lS = SLOTS.index("lS")
    lead_now = np.minimum(tab_now[1][:, lS] / rho, 1.0)
    lead_next = np.minimum(tab_next[1][:, lS] / rho, 1.0)
    r3 = np.abs(np.asarray(lane_change)) * lead_now * np.minimum(0.0, lead_next - lead_now)

    r_fail = np.where(np.asarray(infeasible), cfg.r_fail, 0.0)
    return r1, r2, r3, r_fail


def total_reward(terms, characters) -> np.ndarray:
    r1, r2, r3, r_fail = terms
    c = np.asarray(characters)
    return c[:, 0] * r1 + c[:, 1] * r2 + c[:, 2] * r3 + r_fail


def reward(state: WorldState, action, next_state: WorldState, character, infeasible: bool,
           cfg: EnvConfig, agent: int) -> RewardBreakdown:
    lane_change = np.zeros(state.n_agents, dtype=np.int64)
    lane_change[agent] = action.a_d
    flags = np.zeros(state.n_agents, dtype=bool)
    flags[agent] = infeasible
    r1, r2, r3, rf = (float(t[agent]) for t in reward_terms(state, lane_change, next_state, flags, cfg))
    c = np.asarray(character, dtype=np.float64)
    return RewardBreakdown(r1, r2, r3, rf, float(c[0] * r1 + c[1] * r2 + c[2] * r3 + rf))


def with_overrides(cfg: EnvConfig, **kwargs) -> EnvConfig:
    return replace(cfg, **kwargs)
