"""Gate-racing reward terms, potential-based shaping, and the PFBRS/FARS totals.

Every term works on scalars or on batches (leading axis = environment).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .fuzzy import FuzzySystem

MODES = ("pfbrs", "fars_mamdani", "fars_sugeno")
DISTANCE_SIGNS = ("negative_distance", "literal")
CENTER_MODES = ("literal", "aligned")


class RewardConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    c1: float = 10.0  # gate bonus
    c2: float = 1.0  # hover scale, per second
    c3: float = 10.0  # collision penalty magnitude
    gamma: float = 0.99
    dt: float = 0.02
    mode: str = "pfbrs"
    d_max: float = 3.0
    v_max: float = 5.0
    distance_potential_sign: str = "negative_distance"
    center_mode: str = "literal"

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "dt", "d_max", "v_max"):
            if not getattr(self, name) > 0:
                raise RewardConfigError(f"reward.{name} must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise RewardConfigError("reward.gamma must lie in [0, 1)")
        if self.mode not in MODES:
            raise RewardConfigError(f"reward.mode must be one of {MODES}")
        if self.distance_potential_sign not in DISTANCE_SIGNS:
            raise RewardConfigError(f"reward.distance_potential_sign must be one of {DISTANCE_SIGNS}")
        if self.center_mode not in CENTER_MODES:
            raise RewardConfigError(f"reward.center_mode must be one of {CENTER_MODES}")

    @property
    def engine(self) -> str | None:
        return self.mode.split("_", 1)[1] if self.mode.startswith("fars_") else None


def gate_reward(passed, cfg: RewardConfig):
    return np.where(passed, cfg.c1, 0.0) if np.ndim(passed) else (cfg.c1 if passed else 0.0)


def collision_penalty(collided, cfg: RewardConfig):
    return np.where(collided, -cfg.c3, 0.0) if np.ndim(collided) else (-cfg.c3 if collided else 0.0)


def _norm(x):
    return np.linalg.norm(np.asarray(x, dtype=float), axis=-1)


def final_hover_reward(p, p_goal, in_final_phase, cfg: RewardConfig):
    r = cfg.c2 * np.exp(-_norm(np.subtract(p, p_goal))) * cfg.dt
    return np.where(in_final_phase, r, 0.0) if np.ndim(r) else (float(r) if in_final_phase else 0.0)


def distance_potential(p, p_target, cfg: RewardConfig):
    """Distance-to-target potential, negated by default so that approach is rewarded."""
    sign = -1.0 if cfg.distance_potential_sign == "negative_distance" else 1.0
    out = sign * _norm(np.subtract(p, p_target)) * cfg.dt
    return out if np.ndim(out) else float(out)


def center_alignment_potential(v_agent, normal, mode: str = "literal"):
    """``exp(-|n . v|)`` on unit vectors (``aligned``: ``exp(-(1 - |n . v|))``).

    A zero velocity has no direction; its dot product is taken as 0.
    """
    v = np.asarray(v_agent, dtype=float)
    n = np.asarray(normal, dtype=float)
    speed = _norm(v)
    n_unit = n / _norm(n)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(speed > 0.0, (v * n_unit).sum(axis=-1) / speed, 0.0)
    align = np.minimum(np.abs(cos), 1.0)
    out = np.exp(-align) if mode == "literal" else np.exp(-(1.0 - align))
    return out if np.ndim(out) else float(out)


def pbrs_delta(current, previous, gamma: float):
    """Return ``(gamma * current - previous, current)``; an absent (NaN/None) previous yields 0."""
    if previous is None:
        previous = np.nan
    current = np.asarray(current, dtype=float)
    previous = np.asarray(previous, dtype=float)
    delta = np.where(np.isnan(previous), 0.0, gamma * current - previous)
    if delta.ndim == 0:
        return float(delta), float(current)
    return delta, current.copy()


class PotentialTracker:
    """Previous-step potentials per environment; NaN marks "absent" (episode start)."""

    def __init__(self, n: int = 1):
        self.prev_dist = np.full(n, np.nan)
        self.prev_center = np.full(n, np.nan)

    def reset(self, mask=None):
        if mask is None:
            self.prev_dist[:] = np.nan
            self.prev_center[:] = np.nan
        else:
            self.prev_dist[mask] = np.nan
            self.prev_center[mask] = np.nan


def vd_fuzzy_reward(dist, speed, engine: str, fuzzy_system: FuzzySystem, cfg: RewardConfig):
    v_hat = np.clip(np.asarray(speed, dtype=float) / cfg.v_max, 0.0, 1.0)
    d_hat = np.clip(np.asarray(dist, dtype=float) / cfg.d_max, 0.0, 1.0)
    out = fuzzy_system.infer(engine, v_hat, d_hat) * cfg.dt
    return out if np.ndim(out) else float(out)


@dataclass
class RewardBreakdown:
    gate: np.ndarray
    final_hover: np.ndarray
    dist_shaped: np.ndarray
    center_shaped: np.ndarray
    vd_fuzzy: np.ndarray
    collision: np.ndarray
    total: np.ndarray

    COLUMNS = ("gate", "final_hover", "dist_shaped", "center_shaped", "vd_fuzzy", "collision", "total")

    def rows(self):
        cols = [np.atleast_1d(getattr(self, f.name)) for f in fields(self)]
        return zip(*cols)


@dataclass
class RewardState:
    """Post-step quantities the reward needs, batched over environments."""

    p: np.ndarray  # (n, 3)
    v: np.ndarray  # (n, 3)
    target: np.ndarray  # active gate centre, or goal once hovering
    normal: np.ndarray  # active (or final) gate normal
    goal: np.ndarray
    hovering: np.ndarray  # (n,) bool
    gate_passed: np.ndarray  # (n,) bool
    failed: np.ndarray  # collision or out-of-bounds


class RewardFunction:
    """Composes the per-step total for one configured mode."""

    def __init__(self, cfg: RewardConfig, fuzzy_system: FuzzySystem | None = None):
        if cfg.engine is not None and fuzzy_system is None:
            raise RewardConfigError(f"mode {cfg.mode} needs a fuzzy system")
        self.cfg = cfg
        self.fuzzy_system = fuzzy_system

    def __call__(self, s: RewardState, tracker: PotentialTracker) -> RewardBreakdown:
        cfg = self.cfg
        n = len(s.p)
        zeros = np.zeros(n)
        dist = _norm(s.p - s.target)

        gate = gate_reward(np.asarray(s.gate_passed), cfg)
        hover = final_hover_reward(s.p, s.goal, np.asarray(s.hovering), cfg)
        die = collision_penalty(np.asarray(s.failed), cfg)
        center_phi = center_alignment_potential(s.v, s.normal, cfg.center_mode)
        center, tracker.prev_center = pbrs_delta(center_phi, tracker.prev_center, cfg.gamma)

        if cfg.engine is None:
            dist_phi = distance_potential(s.p, s.target, cfg)
            dist_shaped, tracker.prev_dist = pbrs_delta(dist_phi, tracker.prev_dist, cfg.gamma)
            vd = zeros
            total = gate + hover + dist_shaped + center + die
        else:
            dist_shaped = zeros
            vd = vd_fuzzy_reward(dist, _norm(s.v), cfg.engine, self.fuzzy_system, cfg)
            total = gate + hover + vd + center + die

        return RewardBreakdown(
            gate=np.asarray(gate, dtype=float), final_hover=np.asarray(hover, dtype=float),
            dist_shaped=np.asarray(dist_shaped, dtype=float), center_shaped=np.asarray(center, dtype=float),
            vd_fuzzy=np.asarray(vd, dtype=float), collision=np.asarray(die, dtype=float),
            total=np.asarray(total, dtype=float),
        )


def total_reward(state: RewardState, tracker: PotentialTracker, cfg: RewardConfig,
                 fuzzy_system: FuzzySystem | None = None) -> RewardBreakdown:
    return RewardFunction(cfg, fuzzy_system)(state, tracker)
