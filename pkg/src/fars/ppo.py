"""PPO actor-critic with hand-written backpropagation in numpy.

Training runs in float32 by default (`ppo.dtype`); the loss and its gradient work
in whatever precision the parameters carry, so gradient checks use float64.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .course import difficulty_params
from .fuzzy import FuzzySystem, default_system
from .reward import RewardConfig, RewardFunction
from .sim import ACTION_DIM, OBS_DIM, SimConfig, VecRacingEnv, derive_seed

log = logging.getLogger(__name__)

# The upper bound keeps exploration noise at or below one action_scale; beyond
# that the per-axis acceleration clamp turns extra noise into pure variance.
LOG_STD_MIN, LOG_STD_MAX = -5.0, 0.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class TrainingAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    lr0: float = 4e-4
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_envs: int = 64
    horizon: int = 128
    epochs: int = 150
    minibatches: int = 4
    update_epochs: int = 4
    value_coef: float = 0.5
    target_kl: float = 0.01
    seed: int = 5
    hidden: int = 128
    max_grad_norm: float = 0.0  # 0 disables per-network gradient-norm clipping
    action_scale: float = 8.0
    init_log_std: float = 0.0
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    checkpoint_every: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("ppo.gamma must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("ppo.gae_lambda must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("ppo.clip_eps must be positive")
        for name in ("n_envs", "horizon", "minibatches", "update_epochs", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ppo.{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("ppo.epochs must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("ppo.dtype must be float32 or float64")


# -- networks -------------------------------------------------------------


@dataclass
class PolicyParams:
    """Weights ``[W0, b0, W1, b1, W2, b2]`` of the actor and the critic."""

    actor: list[np.ndarray]
    critic: list[np.ndarray]

    @property
    def arrays(self) -> list[np.ndarray]:
        return self.actor + self.critic

    def copy(self) -> "PolicyParams":
        return PolicyParams([a.copy() for a in self.actor], [c.copy() for c in self.critic])

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams([a.astype(dtype) for a in self.actor], [c.astype(dtype) for c in self.critic])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)


def _layer(rng, fan_in, fan_out, scale=1.0):
    bound = math.sqrt(3.0 / fan_in) * scale
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(seed: int, obs_dim: int = OBS_DIM, action_dim: int = ACTION_DIM,
                hidden: int = 128, init_log_std: float = 0.0) -> PolicyParams:
    rng = np.random.default_rng(derive_seed(seed, 0x1417))
    actor, critic = [], []
    for net, out_dim, out_scale in ((actor, 2 * action_dim, 0.01), (critic, 1, 1.0)):
        net.extend(_layer(rng, obs_dim, hidden))
        net.extend(_layer(rng, hidden, hidden))
        net.extend(_layer(rng, hidden, out_dim, out_scale))
    actor[-1][action_dim:] = init_log_std
    return PolicyParams(actor, critic)


def mlp_forward(layers, x):
    W0, b0, W1, b1, W2, b2 = layers
    h1 = np.tanh(x @ W0 + b0)
    h2 = np.tanh(h1 @ W1 + b1)
    return h2 @ W2 + b2, (x, h1, h2)


def mlp_backward(layers, cache, dout):
    _, _, W1, _, W2, _ = layers
    x, h1, h2 = cache
    dz2 = (dout @ W2.T) * (1.0 - h2 * h2)
    dz1 = (dz2 @ W1.T) * (1.0 - h1 * h1)
    return [x.T @ dz1, dz1.sum(0), h1.T @ dz2, dz2.sum(0), h2.T @ dout, dout.sum(0)]


def policy_forward(params: PolicyParams, obs):
    """Action mean, clamped log-std, and value estimate for a batch of observations."""
    obs = np.atleast_2d(obs)
    out, _ = mlp_forward(params.actor, obs)
    value, _ = mlp_forward(params.critic, obs)
    a = out.shape[1] // 2
    return out[:, :a], np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX), value[:, 0]


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(-1)


def sample_action(mean, log_std, rng: np.random.Generator):
    xi = rng.standard_normal(np.shape(mean))
    action = mean + np.exp(log_std) * xi
    return action, gaussian_log_prob(action, mean, log_std)


# -- advantages -----------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float):
    """GAE over a ``(horizon, n_envs)`` rollout.

    ``dones[t]`` marks that the episode ended with transition ``t``;
    ``bootstrap_values`` is the value of the state after the last step.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(rewards[0])
    next_value = np.asarray(bootstrap_values, dtype=float)
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-12)


# -- loss and gradients ---------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def __len__(self):
        return len(self.obs)


def ppo_loss(params: PolicyParams, batch: Batch, cfg: PPOConfig, with_grad: bool = True):
    """Clipped-surrogate + value + entropy loss and its gradient w.r.t. every array."""
    B = len(batch)
    out, a_cache = mlp_forward(params.actor, batch.obs)
    value, c_cache = mlp_forward(params.critic, batch.obs)
    value = value[:, 0]
    A = out.shape[1] // 2
    mean, raw_log_std = out[:, :A], out[:, A:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std_inv = np.exp(-log_std)
    z = (batch.actions - mean) * std_inv
    logp = (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(-1)
    log_ratio = logp - batch.log_probs
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    policy_loss = -np.minimum(unclipped, clipped).mean()
    value_loss = ((value - batch.returns) ** 2).mean()
    entropy = (log_std + 0.5 * (1.0 + LOG_2PI)).sum(-1).mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    info = {
        "loss": float(loss), "policy_loss": float(policy_loss), "value_loss": float(value_loss),
        "entropy": float(entropy), "kl": float(((ratio - 1.0) - log_ratio).mean()),
        "clip_frac": float((np.abs(ratio - 1.0) > cfg.clip_eps).mean()),
    }
    if not with_grad:
        return loss, None, info

    # d loss / d logp: only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -unclipped / B, 0.0)
    dmean = dlogp[:, None] * z * std_inv
    dlog_std = dlogp[:, None] * (z * z - 1.0) - cfg.entropy_coef / B
    dlog_std = np.where((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX), dlog_std, 0.0)
    g_actor = mlp_backward(params.actor, a_cache, np.concatenate([dmean, dlog_std], axis=1))
    dvalue = (2.0 * cfg.value_coef / B) * (value - batch.returns)
    g_critic = mlp_backward(params.critic, c_cache, dvalue[:, None])
    return loss, PolicyParams(g_actor, g_critic), info


class Adam:
    def __init__(self, params: PolicyParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays]
        self.v = [np.zeros_like(a) for a in params.arrays]
        self.t = 0

    def step(self, params: PolicyParams, grads: PolicyParams, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params.arrays, grads.arrays, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_grads(arrays, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in arrays))
    if max_norm > 0 and norm > max_norm:
        for g in arrays:
            g *= max_norm / norm
    return norm


def adapt_lr(lr: float, kl: float, cfg: PPOConfig) -> float:
    if kl > 1.5 * cfg.target_kl:
        lr *= 0.5
    elif kl < cfg.target_kl / 1.5:
        lr *= 1.1
    return min(max(lr, cfg.lr_min), cfg.lr_max)


def ppo_update(params: PolicyParams, batch: Batch, cfg: PPOConfig, opt: Adam, lr: float,
               rng: np.random.Generator):
    """Several clipped-surrogate passes over shuffled minibatches; returns (lr, stats)."""
    n = len(batch)
    mb = max(n // cfg.minibatches, 1)
    stats = []
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(n)
        kls = []
        for k in range(cfg.minibatches):
            idx = perm[k * mb:(k + 1) * mb] if k < cfg.minibatches - 1 else perm[k * mb:]
            loss, grads, info = ppo_loss(params, batch.take(idx), cfg)
            if not np.isfinite(loss) or not grads.is_finite():
                log.error("non-finite loss in minibatch %d", k)
                raise TrainingAbort(f"non-finite loss in minibatch {k}")
            _clip_grads(grads.actor, cfg.max_grad_norm)
            _clip_grads(grads.critic, cfg.max_grad_norm)
            opt.step(params, grads, lr)
            kls.append(info["kl"])
            stats.append(info)
        lr = adapt_lr(lr, float(np.mean(kls)), cfg)
    if not params.is_finite():
        raise TrainingAbort("parameters became non-finite")
    summary = {key: float(np.mean([s[key] for s in stats])) for key in stats[0]}
    return lr, summary


# -- training loop --------------------------------------------------------

STATS_COLUMNS = (
    "epoch", "episodes", "mean_episode_reward", "mean_gate_reward", "mean_hover_reward",
    "mean_gates_passed", "policy_loss", "value_loss", "entropy", "kl", "lr",
)


def make_reward_fn(reward_cfg: RewardConfig, fuzzy_system: FuzzySystem | None = None):
    if reward_cfg.engine is not None and fuzzy_system is None:
        fuzzy_system = default_system()
    return RewardFunction(reward_cfg, fuzzy_system)


def train(level: str, reward_mode: str, cfg: PPOConfig, *, reward_cfg: RewardConfig | None = None,
          sim_cfg: SimConfig | None = None, fuzzy_system: FuzzySystem | None = None,
          out_dir=None, experiment: dict | None = None):
    """Train one policy; returns ``(params, history)`` with one stats dict per epoch."""
    difficulty_params(level)
    sim_cfg = sim_cfg or SimConfig()
    reward_cfg = reward_cfg or RewardConfig(mode=reward_mode, gamma=cfg.gamma, dt=sim_cfg.dt)
    if reward_cfg.mode != reward_mode:
        raise ValueError(f"reward mode mismatch: {reward_cfg.mode} vs {reward_mode}")
    reward_fn = make_reward_fn(reward_cfg, fuzzy_system)
    dtype = np.dtype(cfg.dtype)
    params = init_params(cfg.seed, hidden=cfg.hidden, init_log_std=cfg.init_log_std).astype(dtype)
    history: list[dict] = []
    meta = {"level": level, "reward_mode": reward_mode, "ppo": asdict(cfg), "reward": asdict(reward_cfg),
            "sim": asdict(sim_cfg), **(experiment or {})}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint_0000.json", params, meta, epoch=0)
    if cfg.epochs == 0:
        if out_dir is not None:
            write_stats_csv(out_dir / "stats.csv", history)
        return params, history

    env = VecRacingEnv(cfg.n_envs, level, sim_cfg, reward_fn, derive_seed(cfg.seed, 0xE1))
    act_rng = np.random.default_rng(derive_seed(cfg.seed, 0xAC))
    upd_rng = np.random.default_rng(derive_seed(cfg.seed, 0x0D))
    opt = Adam(params)
    lr = cfg.lr0
    obs = env.observe()
    T, N = cfg.horizon, cfg.n_envs
    buf_obs = np.zeros((T, N, OBS_DIM), dtype=dtype)
    buf_act = np.zeros((T, N, ACTION_DIM), dtype=dtype)
    buf_logp = np.zeros((T, N), dtype=dtype)
    buf_rew = np.zeros((T, N))
    buf_val = np.zeros((T, N))
    buf_done = np.zeros((T, N), dtype=bool)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        finished = {"gates": [], "ret": [], "gate": [], "hover": []}
        for t in range(T):
            mean, log_std, value = policy_forward(params, obs.astype(dtype))
            action, logp = sample_action(mean, log_std, act_rng)
            action = action.astype(dtype)
            logp = gaussian_log_prob(action, mean, log_std)
            next_obs, reward, done, info = env.step(cfg.action_scale * action.astype(float))
            reward = reward.copy()
            if done.any():
                idx = info["done_idx"]
                trunc = info["timed_out"][idx] & ~(info["collided"][idx] | info["out_of_bounds"][idx])
                if trunc.any():
                    # time limit is not part of the observed state: bootstrap through it
                    _, _, v_term = policy_forward(params, info["terminal_obs"][trunc].astype(dtype))
                    reward[idx[trunc]] += cfg.gamma * v_term
                finished["gates"].extend(info["episode_gates"].tolist())
                finished["ret"].extend(info["episode_return"].tolist())
                finished["gate"].extend(info["episode_gate_reward"].tolist())
                finished["hover"].extend(info["episode_hover_reward"].tolist())
            buf_obs[t], buf_act[t], buf_logp[t] = obs, action, logp
            buf_rew[t], buf_val[t], buf_done[t] = reward, value, done
            obs = next_obs

        _, _, last_value = policy_forward(params, obs.astype(dtype))
        adv, ret = compute_gae(buf_rew, buf_val, buf_done, last_value, cfg.gamma, cfg.gae_lambda)
        batch = Batch(
            buf_obs.reshape(T * N, -1), buf_act.reshape(T * N, -1), buf_logp.reshape(-1),
            normalize_advantages(adv.reshape(-1)).astype(dtype), ret.reshape(-1).astype(dtype),
        )
        lr_used = lr
        lr, upd = ppo_update(params, batch, cfg, opt, lr, upd_rng)

        def _mean(xs):
            return float(np.mean(xs)) if xs else float("nan")

        row = {
            "epoch": epoch, "episodes": len(finished["gates"]),
            "mean_episode_reward": _mean(finished["ret"]),
            "mean_gate_reward": _mean(finished["gate"]),
            "mean_hover_reward": _mean(finished["hover"]),
            "mean_gates_passed": _mean(finished["gates"]),
            "policy_loss": upd["policy_loss"], "value_loss": upd["value_loss"],
            "entropy": upd["entropy"], "kl": upd["kl"], "lr": lr_used,
        }
        history.append(row)
        log.info("epoch %d gates %.3f return %.2f kl %.4f lr %.2e (%.2fs)", epoch,
                 row["mean_gates_passed"], row["mean_episode_reward"], row["kl"], lr_used,
                 time.perf_counter() - t0)
        if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_checkpoint(out_dir / f"checkpoint_{epoch:04d}.json", params, meta, epoch=epoch)
            write_stats_csv(out_dir / "stats.csv", history)
    return params, history


# -- persistence ----------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def write_stats_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for row in history:
            w.writerow([fmt(row[c]) for c in STATS_COLUMNS])


def save_checkpoint(path, params: PolicyParams, meta: dict, epoch: int):
    doc = {
        "format": "fars-policy",
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "shapes": {"actor": [list(a.shape) for a in params.actor],
                   "critic": [list(c.shape) for c in params.critic]},
        "config": meta,
        "actor": [a.ravel().tolist() for a in params.actor],
        "critic": [c.ravel().tolist() for c in params.critic],
    }
    Path(path).write_text(json.dumps(doc))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, obs_dim: int = OBS_DIM, action_dim: int = ACTION_DIM):
    """Return ``(params, doc)``; raises CheckpointError on format or shape mismatch."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "fars-policy" or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
    try:
        nets = {}
        for name in ("actor", "critic"):
            shapes = doc["shapes"][name]
            nets[name] = [np.asarray(flat, dtype=float).reshape(shape)
                          for flat, shape in zip(doc[name], shapes, strict=True)]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed parameters ({exc})") from exc
    params = PolicyParams(nets["actor"], nets["critic"])
    if (params.actor[0].shape[0] != obs_dim or params.actor[-1].shape[0] != 2 * action_dim
            or params.critic[0].shape[0] != obs_dim or params.critic[-1].shape[0] != 1):
        raise CheckpointError(f"{path}: network shapes do not match obs_dim={obs_dim}, action_dim={action_dim}")
    return params, doc
