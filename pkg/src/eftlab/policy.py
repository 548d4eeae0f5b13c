"""Character-conditioned hybrid-action actor-critic trained with TD3.

The actor maps ``[observation, character]`` to two tanh outputs: a normalized
acceleration and a proto lane-change value. The proto value is quantized into
an integer lane change with :func:`post_process`. Twin critics score
``[observation, normalized acceleration, normalized proto, character]``, i.e.
they see the proto value, never the quantized one.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import env as envmod
from .env import OBS_DIM, CharacterSpace, EnvConfig, IdmParams
from .numerics import AdamState, DenseNetwork, SeededRng, adam_step, backward, forward, forward_cache, soft_update

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or malformed checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class HybridAction:
    a_c: float
    proto_d: float
    a_d: int


def post_process(proto, W: int = 1):
    """Quantize a proto action into ``{-W, ..., W}``.

    ``min(floor((2W+1)/(2W) * (proto + W/(2W+1))), W)`` with ``proto`` first
    clamped into the quantizer domain ``[-W, W]``. Works on scalars and arrays.
    """
    if W < 1:
        raise ValueError("W must be >= 1")
    p = np.clip(np.asarray(proto, dtype=np.float64), -W, W)
    scale = (2 * W + 1) / (2 * W)
    out = np.minimum(np.floor(scale * (p + W / (2 * W + 1))), W)
    # at p = -W the exact value is -W; rounding can land just below it
    out = np.maximum(out, -W).astype(np.int64)
    if out.ndim == 0:
        return int(out)
    return out


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 300
    steps_per_episode: int = 400
    policy_delay: int = 2
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    buffer_capacity: int = 250_000
    batch_size: int = 128
    gamma: float = 0.95
    tau: float = 5e-3
    explore_sigma_c: float = 0.1
    explore_sigma_d: float = 0.6
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    hidden_sizes: tuple[int, ...] = (64, 64)
    warmup_steps: int = 1000
    character_space: CharacterSpace = field(default_factory=CharacterSpace)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if self.episodes < 0 or self.steps_per_episode < 1 or self.batch_size < 1:
            raise ValueError("episodes >= 0, steps_per_episode >= 1 and batch_size >= 1 required")


@dataclass
class PolicyBundle:
    actor: DenseNetwork
    critic1: DenseNetwork
    critic2: DenseNetwork
    actor_target: DenseNetwork
    critic1_target: DenseNetwork
    critic2_target: DenseNetwork
    env_config: EnvConfig
    train_config: TrainConfig
    optimizers: dict | None = field(default=None, repr=False, compare=False)

    NETWORK_NAMES = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")

    @property
    def char_dim(self) -> int:
        return self.train_config.character_space.dim

    def networks(self) -> dict[str, DenseNetwork]:
        return {name: getattr(self, name) for name in self.NETWORK_NAMES}

    def ensure_optimizers(self) -> dict:
        if self.optimizers is None:
            tc = self.train_config
            self.optimizers = {
                "actor": AdamState.for_params(self.actor.params(), tc.actor_lr),
                "critic1": AdamState.for_params(self.critic1.params(), tc.critic_lr),
                "critic2": AdamState.for_params(self.critic2.params(), tc.critic_lr),
            }
        return self.optimizers


def init_bundle(env_cfg: EnvConfig, train_cfg: TrainConfig, rng: SeededRng) -> PolicyBundle:
    k = train_cfg.character_space.dim
    hidden = tuple(train_cfg.hidden_sizes)
    actor = DenseNetwork.init((OBS_DIM + k, *hidden, 2), rng, output_activation="tanh")
    critic1 = DenseNetwork.init((OBS_DIM + 2 + k, *hidden, 1), rng)
    critic2 = DenseNetwork.init((OBS_DIM + 2 + k, *hidden, 1), rng)
    return PolicyBundle(actor, critic1, critic2, actor.copy(), critic1.copy(), critic2.copy(),
                        env_cfg, train_cfg)


# --- action mapping -------------------------------------------------------

def accel_from_unit(u, cfg: EnvConfig):
    return cfg.a_min + 0.5 * (np.asarray(u) + 1.0) * (cfg.a_max - cfg.a_min)


def unit_from_accel(a, cfg: EnvConfig):
    return 2.0 * (np.asarray(a) - cfg.a_min) / (cfg.a_max - cfg.a_min) - 1.0


def actor_inputs(obs, chars) -> np.ndarray:
    obs = np.atleast_2d(obs)
    chars = np.atleast_2d(chars)
    if chars.shape[0] == 1 and obs.shape[0] > 1:
        chars = np.broadcast_to(chars, (obs.shape[0], chars.shape[1]))
    return np.concatenate([obs, chars], axis=1)


def act_batch(bundle: PolicyBundle, obs, chars, explore: bool = False, rng: SeededRng | None = None):
    """Actions for a batch of agents. Returns ``(a_c, proto_d, a_d)`` arrays."""
    cfg = bundle.env_config
    W = cfg.lane_change_width
    u = forward(bundle.actor, actor_inputs(obs, chars))
    u_c, u_d = u[:, 0], u[:, 1]
    if explore:
        if rng is None:
            raise ValueError("exploration needs an rng")
        tc = bundle.train_config
        n = u.shape[0]
        u_c = np.clip(u_c + rng.normal(0.0, tc.explore_sigma_c, size=n), -1.0, 1.0)
        u_d = np.clip(u_d + rng.normal(0.0, tc.explore_sigma_d, size=n), -1.0, 1.0)
    proto = W * u_d
    return accel_from_unit(u_c, cfg), proto, post_process(proto, W)


def act(bundle: PolicyBundle, obs, character, explore: bool = False, rng: SeededRng | None = None) -> HybridAction:
    a_c, proto, a_d = act_batch(bundle, obs, character, explore, rng)
    return HybridAction(float(a_c[0]), float(proto[0]), int(a_d[0]))


def random_actions(cfg: EnvConfig, rng: SeededRng, n: int):
    """Uniform actions: acceleration in [a_min, a_max], proto uniform in [-W, W]."""
    W = cfg.lane_change_width
    a_c = rng.uniform(cfg.a_min, cfg.a_max, size=n)
    proto = rng.uniform(-W, W, size=n)
    return a_c, proto, post_process(proto, W)


# --- replay ---------------------------------------------------------------

@dataclass
class ReplayRecord:
    o: np.ndarray
    c: np.ndarray
    a_c: float
    proto_d: float
    reward: float
    o_next: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    chars: np.ndarray
    a_c: np.ndarray
    proto: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.reward)

    @classmethod
    def from_records(cls, records) -> "Batch":
        return cls(
            np.array([r.o for r in records], dtype=np.float64),
            np.array([r.c for r in records], dtype=np.float64),
            np.array([r.a_c for r in records], dtype=np.float64),
            np.array([r.proto_d for r in records], dtype=np.float64),
            np.array([r.reward for r in records], dtype=np.float64),
            np.array([r.o_next for r in records], dtype=np.float64),
            np.array([r.done for r in records], dtype=np.float64),
        )


class ReplayBuffer:
    def __init__(self, capacity: int, char_dim: int = 3):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, OBS_DIM))
        self.chars = np.zeros((capacity, char_dim))
        self.a_c = np.zeros(capacity)
        self.proto = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, OBS_DIM))
        self.done = np.zeros(capacity)
        self.size = 0
        self._ptr = 0

    def __len__(self):
        return self.size

    def add_many(self, obs, chars, a_c, proto, reward, next_obs, done):
        reward = np.asarray(reward, dtype=np.float64)
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(reward)) and np.all(np.isfinite(next_obs))):
            raise ValueError("replay records must be finite")
        n = len(reward)
        idx = (self._ptr + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.chars[idx] = chars
        self.a_c[idx] = a_c
        self.proto[idx] = proto
        self.reward[idx] = reward
        self.next_obs[idx] = next_obs
        self.done[idx] = done
        self._ptr = (self._ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def add(self, rec: ReplayRecord):
        self.add_many(rec.o[None], np.asarray(rec.c)[None], [rec.a_c], [rec.proto_d], [rec.reward],
                      rec.o_next[None], [float(rec.done)])

    def sample(self, batch_size: int, rng: SeededRng) -> Batch:
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.chars[idx], self.a_c[idx], self.proto[idx],
                     self.reward[idx], self.next_obs[idx], self.done[idx])


# --- TD3 ------------------------------------------------------------------

def critic_inputs(obs, u_c, u_d, chars) -> np.ndarray:
    return np.concatenate([obs, np.asarray(u_c)[:, None], np.asarray(u_d)[:, None], chars], axis=1)


def td_targets(bundle: PolicyBundle, batch: Batch, rng: SeededRng) -> np.ndarray:
    """``r + gamma (1 - done) min(Q1', Q2')`` at the smoothed target action."""
    tc = bundle.train_config
    u = forward(bundle.actor_target, actor_inputs(batch.next_obs, batch.chars))
    noise = np.clip(rng.normal(0.0, tc.target_noise, size=u.shape), -tc.target_noise_clip, tc.target_noise_clip)
    u = np.clip(u + noise, -1.0, 1.0)
    x = critic_inputs(batch.next_obs, u[:, 0], u[:, 1], batch.chars)
    q = np.minimum(forward(bundle.critic1_target, x)[:, 0], forward(bundle.critic2_target, x)[:, 0])
    return batch.reward + tc.gamma * (1.0 - batch.done) * q


def batch_critic_inputs(bundle: PolicyBundle, batch: Batch) -> np.ndarray:
    cfg = bundle.env_config
    return critic_inputs(batch.obs, unit_from_accel(batch.a_c, cfg),
                         batch.proto / cfg.lane_change_width, batch.chars)


def critic_loss_and_grads(critic: DenseNetwork, x: np.ndarray, y: np.ndarray):
    """Mean squared TD error of one critic and its parameter gradients."""
    cache = forward_cache(critic, x)
    err = cache[-1][:, 0] - y
    loss = float(np.mean(err**2))
    grads, _ = backward(critic, x, (2.0 / len(y)) * err[:, None], cache=cache)
    return loss, grads


def actor_loss_and_grads(bundle: PolicyBundle, batch: Batch):
    """``-mean Q1(o, pi(o, c), c)`` and its gradient w.r.t. the actor parameters."""
    xa = actor_inputs(batch.obs, batch.chars)
    a_cache = forward_cache(bundle.actor, xa)
    u = a_cache[-1]
    xc = critic_inputs(batch.obs, u[:, 0], u[:, 1], batch.chars)
    c_cache = forward_cache(bundle.critic1, xc)
    n = len(batch)
    _, dx = backward(bundle.critic1, xc, np.full((n, 1), -1.0 / n), cache=c_cache)
    grads, _ = backward(bundle.actor, xa, dx[:, OBS_DIM:OBS_DIM + 2], cache=a_cache)
    return float(-np.mean(c_cache[-1])), grads


def td3_update(bundle: PolicyBundle, batch: Batch | None, update_index: int, rng: SeededRng) -> dict:
    """One critic step; on every ``policy_delay``-th index also an actor step and target sync."""
    if batch is None or len(batch) == 0:
        log.warning("td3_update called with an empty batch; skipping")
        return {"critic_loss": None, "actor_loss": None}
    tc = bundle.train_config
    opt = bundle.ensure_optimizers()
    y = td_targets(bundle, batch, rng)
    x = batch_critic_inputs(bundle, batch)
    loss1, g1 = critic_loss_and_grads(bundle.critic1, x, y)
    loss2, g2 = critic_loss_and_grads(bundle.critic2, x, y)
    adam_step(bundle.critic1.params(), g1, opt["critic1"])
    adam_step(bundle.critic2.params(), g2, opt["critic2"])
    report = {"critic_loss": loss1 + loss2, "actor_loss": None}
    if update_index % tc.policy_delay == 0:
        actor_loss, ga = actor_loss_and_grads(bundle, batch)
        adam_step(bundle.actor.params(), ga, opt["actor"])
        soft_update(bundle.actor_target, bundle.actor, tc.tau)
        soft_update(bundle.critic1_target, bundle.critic1, tc.tau)
        soft_update(bundle.critic2_target, bundle.critic2, tc.tau)
        report["actor_loss"] = actor_loss
    return report


# --- rollouts and training ------------------------------------------------

@dataclass
class Checkpoint:
    bundle: PolicyBundle
    seed: int
    format_version: int = FORMAT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[float]


@dataclass
class RolloutLog:
    """Per-step arrays of a multi-agent rollout (``steps`` rows, ``N`` agents)."""

    obs: np.ndarray          # (steps, N, 14) observation before acting
    a_c: np.ndarray          # (steps, N)
    a_d: np.ndarray          # (steps, N)
    rewards: np.ndarray      # (steps, N) total reward
    terms: np.ndarray        # (steps, 4, N) r1, r2, r3, r_fail
    infeasible: np.ndarray   # (steps, N)
    velocities: np.ndarray   # (steps, N) after the step
    lanes: np.ndarray        # (steps, N) after the step
    follower_gap: np.ndarray  # (steps, N) meters after the step, obs_radius if none

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())


def rollout(bundle: PolicyBundle | None, env_cfg: EnvConfig, characters, rng: SeededRng, steps: int,
            policy: str = "greedy", state: envmod.WorldState | None = None) -> RolloutLog:
    """Run every agent with the shared policy (``greedy``) or uniform random actions."""
    chars = np.asarray(characters, dtype=np.float64)
    if state is None:
        state = envmod.reset(rng.spawn(0), env_cfg)
    act_rng = rng.spawn(1)
    n = env_cfg.n_agents
    out = {k: [] for k in ("obs", "a_c", "a_d", "rewards", "terms", "infeasible", "velocities", "lanes", "gap")}
    table = envmod.neighbor_table(state, env_cfg)
    fS = envmod.SLOTS.index("fS")
    for _ in range(steps):
        obs = envmod.observe_all(state, env_cfg, table)
        if policy == "greedy":
            a_c, _, a_d = act_batch(bundle, obs, chars)
        elif policy == "random":
            a_c, _, a_d = random_actions(env_cfg, act_rng, n)
        else:
            raise ValueError(f"unknown rollout policy {policy!r}")
        nxt, infeasible = envmod.step_arrays(state, a_c, a_d, env_cfg)
        next_table = envmod.neighbor_table(nxt, env_cfg)
        terms = envmod.reward_terms(state, a_d, nxt, infeasible, env_cfg, (table, next_table))
        out["obs"].append(obs)
        out["a_c"].append(a_c)
        out["a_d"].append(a_d)
        out["rewards"].append(envmod.total_reward(terms, chars))
        out["terms"].append(np.stack(terms))
        out["infeasible"].append(infeasible)
        out["velocities"].append(nxt.velocities)
        out["lanes"].append(nxt.lanes)
        out["gap"].append(np.minimum(next_table[1][:, fS], env_cfg.obs_radius))
        state, table = nxt, next_table
    return RolloutLog(
        np.array(out["obs"]), np.array(out["a_c"]), np.array(out["a_d"]), np.array(out["rewards"]),
        np.array(out["terms"]), np.array(out["infeasible"]), np.array(out["velocities"]),
        np.array(out["lanes"]), np.array(out["gap"]),
    )


def train_policy(env_cfg: EnvConfig, train_cfg: TrainConfig, seed: int, progress=None) -> TrainResult:
    """Train the shared multi-character policy.

    Every episode re-draws each agent's character from the character space;
    transitions of all agents feed one replay buffer and one update per
    environment step is applied once the warmup phase is over. The returned
    curve holds the mean per-agent, per-step training reward of each episode.
    ``progress`` is called as ``progress(episode, mean_reward)``.
    """
    rng = SeededRng(seed)
    bundle = init_bundle(env_cfg, train_cfg, rng.spawn(0))
    space = train_cfg.character_space
    buffer = ReplayBuffer(train_cfg.buffer_capacity, space.dim)
    env_rng, act_rng, sample_rng, noise_rng = rng.spawn(1), rng.spawn(2), rng.spawn(3), rng.spawn(4)
    n = env_cfg.n_agents
    total_steps = 0
    updates = 0
    curve = []
    for episode in range(train_cfg.episodes):
        state = envmod.reset(env_rng, env_cfg)
        chars = space.sample(env_rng, n)
        table = envmod.neighbor_table(state, env_cfg)
        obs = envmod.observe_all(state, env_cfg, table)
        ep_reward = 0.0
        for _ in range(train_cfg.steps_per_episode):
            if total_steps < train_cfg.warmup_steps:
                a_c, proto, a_d = random_actions(env_cfg, act_rng, n)
            else:
                a_c, proto, a_d = act_batch(bundle, obs, chars, explore=True, rng=act_rng)
            nxt, infeasible = envmod.step_arrays(state, a_c, a_d, env_cfg)
            next_table = envmod.neighbor_table(nxt, env_cfg)
            terms = envmod.reward_terms(state, a_d, nxt, infeasible, env_cfg, (table, next_table))
            r = envmod.total_reward(terms, chars)
            next_obs = envmod.observe_all(nxt, env_cfg, next_table)
            # the ring has no terminal state; episode ends are time limits
            buffer.add_many(obs, chars, a_c, proto, r, next_obs, np.zeros(n))
            ep_reward += float(r.mean())
            total_steps += 1
            if total_steps >= train_cfg.warmup_steps and len(buffer) >= train_cfg.batch_size:
                updates += 1
                td3_update(bundle, buffer.sample(train_cfg.batch_size, sample_rng), updates, noise_rng)
            state, table, obs = nxt, next_table, next_obs
        curve.append(ep_reward / train_cfg.steps_per_episode)
        if progress is not None:
            progress(episode, curve[-1])
    bundle.optimizers = None
    return TrainResult(Checkpoint(bundle, int(seed)), curve)


# --- checkpoint persistence -----------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    shape = tuple(int(s) for s in d["shape"])
    if len(raw) != 8 * math.prod(shape):
        raise CheckpointError(f"parameter block has {len(raw)} bytes, expected {8 * math.prod(shape)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def env_config_to_dict(cfg: EnvConfig) -> dict:
    d = asdict(cfg)
    if isinstance(cfg.target_velocity, tuple):
        d["target_velocity"] = list(cfg.target_velocity)
    return d


def env_config_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    d["idm"] = IdmParams(**d.get("idm", {}))
    if isinstance(d.get("target_velocity"), list):
        d["target_velocity"] = tuple(d["target_velocity"])
    return EnvConfig(**d)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden_sizes"] = list(cfg.hidden_sizes)
    cs = cfg.character_space
    d["character_space"] = {
        "low": list(cs.low),
        "high": list(cs.high),
        "sample_ranges": None if cs.sample_ranges is None else [list(r) for r in cs.sample_ranges],
    }
    return d


def character_space_from_dict(d: dict) -> CharacterSpace:
    ranges = d.get("sample_ranges")
    return CharacterSpace(
        tuple(d.get("low", (0.0, 0.0, 0.0))),
        tuple(d.get("high", (1.0, 1.0, 1.0))),
        None if ranges is None else tuple(tuple(float(x) for x in r) for r in ranges),
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "hidden_sizes" in d:
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
    if "character_space" in d:
        d["character_space"] = character_space_from_dict(d["character_space"])
    return TrainConfig(**d)


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    nets = {}
    for name, net in ckpt.bundle.networks().items():
        nets[name] = {
            "layer_sizes": list(net.layer_sizes),
            "hidden_activation": net.hidden_activation,
            "output_activation": net.output_activation,
            "params": [_encode_array(p) for p in net.params()],
        }
    doc = {
        "format_version": ckpt.format_version,
        "seed": ckpt.seed,
        "env_config": env_config_to_dict(ckpt.bundle.env_config),
        "train_config": train_config_to_dict(ckpt.bundle.train_config),
        "param_order": "W0,b0,W1,b1,... little-endian float64, W stored (fan_in, fan_out) row-major",
        "networks": nets,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def checkpoint_from_json(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("checkpoint header lacks format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {doc['format_version']} != supported {FORMAT_VERSION}")
    try:
        nets = {}
        for name in PolicyBundle.NETWORK_NAMES:
            nd = doc["networks"][name]
            params = [_decode_array(p) for p in nd["params"]]
            nets[name] = DenseNetwork(tuple(nd["layer_sizes"]), params[0::2], params[1::2],
                                      nd["hidden_activation"], nd["output_activation"])
        bundle = PolicyBundle(env_config=env_config_from_dict(doc["env_config"]),
                              train_config=train_config_from_dict(doc["train_config"]), **nets)
        return Checkpoint(bundle, int(doc["seed"]), int(doc["format_version"]))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from None


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint_to_json(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_json(Path(path).read_text())
