"""Fixed-step point-mass gate-racing simulator.

The drone is a sphere of radius ``drone_radius`` driven by a bounded
acceleration command. Gates are circular apertures inside a thin planar
annulus (the frame). Gate passage and frame contact are decided on the swept
segment between consecutive positions, so fast motion cannot tunnel through
a frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .course import SPAWN, CourseSpec, GateSpec, generate_course

OBS_DIM = 13
ACTION_DIM = 3


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.02
    t_max: float = 15.0
    a_max: float = 8.0
    v_cap: float = 4.0
    drone_radius: float = 0.1625
    frame_width: float = 0.05
    spawn_jitter: float = 0.05

    def __post_init__(self):
        for name in ("dt", "t_max", "a_max", "v_cap", "drone_radius", "frame_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"sim.{name} must be positive")
        if self.spawn_jitter < 0:
            raise ValueError("sim.spawn_jitter must be non-negative")
        if abs(self.t_max / self.dt - round(self.t_max / self.dt)) > 1e-9:
            raise ValueError("sim.t_max must be an integer multiple of sim.dt")

    @property
    def max_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass(frozen=True)
class DroneState:
    p: np.ndarray
    v: np.ndarray
    steps: int
    active_gate: int
    n_gates: int
    dt: float

    @property
    def t(self) -> float:
        return self.steps * self.dt

    @property
    def phase(self) -> str:
        return "hovering" if self.active_gate >= self.n_gates else "racing"


@dataclass(frozen=True)
class StepEvents:
    gate_passed: bool = False
    collided: bool = False
    out_of_bounds: bool = False
    timed_out: bool = False

    @property
    def done(self) -> bool:
        return self.collided or self.out_of_bounds or self.timed_out


# -- geometry -------------------------------------------------------------


def _gate_frame(yaw):
    """Unit normal and lateral axes for gate yaw(s); the third axis is world z."""
    c, s = np.cos(yaw), np.sin(yaw)
    z = np.zeros_like(c)
    return np.stack([c, s, z], -1), np.stack([-s, c, z], -1)


def to_gate_frame(p, center, yaw):
    """Coordinates ``(h, y, z)`` of ``p`` relative to a gate: h along the normal."""
    n, lat = _gate_frame(np.asarray(yaw, dtype=float))
    d = np.asarray(p, dtype=float) - np.asarray(center, dtype=float)
    return np.stack([(d * n).sum(-1), (d * lat).sum(-1), d[..., 2]], -1)


def annulus_distance(q, r_in, r_out):
    """Distance from gate-frame point(s) ``q`` to the planar annulus ``r_in <= rho <= r_out``."""
    q = np.asarray(q, dtype=float)
    rho = np.hypot(q[..., 1], q[..., 2])
    excess = np.maximum(np.maximum(r_in - rho, rho - r_out), 0.0)
    return np.hypot(q[..., 0], excess)


def _roots_in_unit(coeffs_low_first) -> list[float]:
    c = np.trim_zeros(np.asarray(coeffs_low_first, dtype=float), "b")
    if len(c) < 2:
        return []
    scale = np.abs(c).max()
    roots = np.roots((c / scale)[::-1])
    real = roots[np.abs(roots.imag) <= 1e-7].real
    return [float(s) for s in real if 0.0 < s < 1.0]


def first_contact(q0, q1, r_in, r_out, radius):
    """Smallest ``s`` in [0, 1] with ``annulus_distance(q0 + s (q1 - q0)) < radius``, or None.

    The open set ``{distance < radius}`` is the union of a slab around the
    annulus and two tubes around its rims; its boundary along the segment lies
    among the roots of linear, quadratic and quartic polynomials in ``s``. The
    segment is split at those roots and each piece is tested at its midpoint.
    """
    q0 = np.asarray(q0, dtype=float)
    d = np.asarray(q1, dtype=float) - q0
    P = np.polynomial.polynomial
    breaks = [0.0, 1.0]
    if d[0] != 0.0:
        breaks += [s for s in ((radius - q0[0]) / d[0], (-radius - q0[0]) / d[0]) if 0.0 < s < 1.0]
    rho2 = np.array([q0[1] ** 2 + q0[2] ** 2, 2 * (q0[1] * d[1] + q0[2] * d[2]), d[1] ** 2 + d[2] ** 2])
    norm2 = rho2 + np.array([q0[0] ** 2, 2 * q0[0] * d[0], d[0] ** 2])
    for rim in (r_in, r_out):
        breaks += _roots_in_unit(rho2 - np.array([rim * rim, 0.0, 0.0]))
        lead = norm2 + np.array([rim * rim - radius * radius, 0.0, 0.0])
        breaks += _roots_in_unit(P.polysub(P.polymul(lead, lead), 4.0 * rim * rim * rho2))
    breaks = sorted(set(breaks))

    if annulus_distance(q0, r_in, r_out) < radius:
        return 0.0
    for lo, hi in zip(breaks, breaks[1:]):
        if annulus_distance(q0 + 0.5 * (lo + hi) * d, r_in, r_out) < radius:
            return lo
    return None


def _crossing(q0, q1):
    """Plane-crossing flags and the crossing parameter/radius for gate-frame endpoints."""
    h0, h1 = q0[..., 0], q1[..., 0]
    crosses = (h0 >= 0.0) != (h1 >= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(crosses, h0 / (h0 - h1), np.nan)
    y = q0[..., 1] + s * (q1[..., 1] - q0[..., 1])
    z = q0[..., 2] + s * (q1[..., 2] - q0[..., 2])
    return crosses, h0 < 0.0, s, np.hypot(y, z)


def gate_pass_check(p_old, p_new, gate: GateSpec, drone_radius: float = 0.1625) -> bool:
    """Front-to-back crossing of the gate plane with full clearance of the rim."""
    q0 = to_gate_frame(p_old, gate.center, gate.yaw)
    q1 = to_gate_frame(p_new, gate.center, gate.yaw)
    crosses, forward, _, rho = _crossing(q0, q1)
    return bool(crosses and forward and rho < gate.diameter / 2 - drone_radius)


def collision_check(p_old, p_new, gate: GateSpec, drone_radius: float = 0.1625,
                    frame_width: float = 0.05) -> bool:
    return _gate_contact(p_old, p_new, gate, drone_radius, frame_width) is not None


def _gate_contact(p_old, p_new, gate: GateSpec, drone_radius, frame_width):
    q0 = to_gate_frame(p_old, gate.center, gate.yaw)
    q1 = to_gate_frame(p_new, gate.center, gate.yaw)
    r_in = gate.diameter / 2
    r_out = r_in + frame_width
    crosses, _, s, rho = _crossing(q0, q1)
    if crosses:
        return float(s) if r_in - drone_radius <= rho <= r_out + drone_radius else None
    return first_contact(q0, q1, r_in, r_out, drone_radius)


# -- batched core ---------------------------------------------------------


@dataclass
class CourseArrays:
    """Gate geometry of one course per environment, stacked on axis 0."""

    centers: np.ndarray  # (n, g, 3)
    yaws: np.ndarray  # (n, g)
    diameters: np.ndarray  # (n, g)
    goal: np.ndarray  # (n, 3)
    lo: np.ndarray  # (n, 3)
    hi: np.ndarray  # (n, 3)

    @classmethod
    def stack(cls, courses) -> "CourseArrays":
        g = {c.n_gates for c in courses}
        if len(g) != 1:
            raise SimError("batched courses must share a gate count")
        return cls(
            centers=np.array([[gt.center for gt in c.gates] for c in courses], dtype=float),
            yaws=np.array([[gt.yaw for gt in c.gates] for c in courses], dtype=float),
            diameters=np.array([[gt.diameter for gt in c.gates] for c in courses], dtype=float),
            goal=np.array([c.goal for c in courses], dtype=float),
            lo=np.array([[b[0] for b in c.bounds] for c in courses], dtype=float),
            hi=np.array([[b[1] for b in c.bounds] for c in courses], dtype=float),
        )

    def assign(self, i: int, course: CourseSpec):
        self.centers[i] = [g.center for g in course.gates]
        self.yaws[i] = [g.yaw for g in course.gates]
        self.diameters[i] = [g.diameter for g in course.gates]
        self.goal[i] = course.goal
        self.lo[i] = [b[0] for b in course.bounds]
        self.hi[i] = [b[1] for b in course.bounds]

    @property
    def n_gates(self) -> int:
        return self.centers.shape[1]


def integrate(p, v, action, cfg: SimConfig):
    """Semi-implicit Euler with per-axis acceleration clamp and speed cap."""
    a = np.clip(action, -cfg.a_max, cfg.a_max)
    v_new = v + a * cfg.dt
    speed = np.linalg.norm(v_new, axis=-1, keepdims=True)
    v_new = np.where(speed > cfg.v_cap, v_new * (cfg.v_cap / np.maximum(speed, 1e-300)), v_new)
    return p + v_new * cfg.dt, v_new


def batch_events(p0, p1, active, course: CourseArrays, cfg: SimConfig):
    """Gate passage and frame contact for each environment's swept segment.

    Returns ``(passed, collided)``. Events are ordered along the segment: a
    contact at or before the pass parameter cancels the pass.
    """
    n, g = course.yaws.shape
    r = cfg.drone_radius
    q0 = to_gate_frame(p0[:, None, :], course.centers, course.yaws)
    q1 = to_gate_frame(p1[:, None, :], course.centers, course.yaws)
    r_in = course.diameters / 2
    r_out = r_in + cfg.frame_width
    crosses, forward, s, rho = _crossing(q0, q1)

    contact = np.full((n, g), np.inf)
    hit = crosses & (rho >= r_in - r) & (rho <= r_out + r)
    contact[hit] = s[hit]

    # non-crossing segments that come within r of a frame: exact check on few candidates
    seg = np.linalg.norm(p1 - p0, axis=-1)[:, None]
    rho0 = np.hypot(q0[..., 1], q0[..., 2])
    near = (~crosses & (np.minimum(np.abs(q0[..., 0]), np.abs(q1[..., 0])) < r)
            & (rho0 > r_in - r - seg) & (rho0 < r_out + r + seg))
    for i, j in zip(*np.nonzero(near)):
        hit_s = first_contact(q0[i, j], q1[i, j], r_in[i, j], r_out[i, j], r)
        if hit_s is not None:
            contact[i, j] = hit_s

    first_hit = contact.min(axis=1)
    collided = np.isfinite(first_hit)

    racing = active < g
    k = np.minimum(active, g - 1)
    rows = np.arange(n)
    clear = rho[rows, k] < r_in[rows, k] - r
    passed = racing & crosses[rows, k] & forward[rows, k] & clear
    passed &= ~(collided & (first_hit <= s[rows, k]))
    return passed, collided


def batch_observe(p, v, active, course: CourseArrays):
    """13-dim observations plus the reward target and normal per environment.

    Layout: target offset, velocity, world-frame gate normal, offset of the
    following gate (or goal), hovering flag. The three vector blocks other
    than the normal are expressed in the active gate's frame (normal,
    lateral, up); once hovering, the last gate's frame is used.
    """
    n, g = course.yaws.shape
    rows = np.arange(n)
    k = np.minimum(active, g - 1)
    hovering = active >= g
    target = np.where(hovering[:, None], course.goal, course.centers[rows, k])
    yaw = course.yaws[rows, k]
    normal, lateral = _gate_frame(yaw)
    def frame(x):
        return np.stack([(x * normal).sum(-1), (x * lateral).sum(-1), x[:, 2]], -1)

    nk = np.minimum(active + 1, g - 1)
    after = np.where((active + 1 < g)[:, None], course.centers[rows, nk], course.goal)
    obs = np.concatenate([frame(target - p), frame(v), normal, frame(after - p),
                          hovering[:, None].astype(float)], axis=1)
    return obs, target, normal


def spawn(rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    return np.asarray(SPAWN, dtype=float) + rng.uniform(-cfg.spawn_jitter, cfg.spawn_jitter, size=3)


# -- single-environment API ----------------------------------------------


def reset(course: CourseSpec, sim_cfg: SimConfig, seed: int) -> DroneState:
    _check_course(course, sim_cfg)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return DroneState(spawn(rng, sim_cfg), np.zeros(3), 0, 0, course.n_gates, sim_cfg.dt)


def step(state: DroneState, action, course: CourseSpec, sim_cfg: SimConfig):
    action = np.asarray(action, dtype=float)
    if action.shape != (3,) or not np.all(np.isfinite(action)):
        raise SimError(f"invalid action {action!r} at t={state.t:.3f}s")
    arrays = CourseArrays.stack([course])
    p1, v1 = integrate(state.p[None], state.v[None], action[None], sim_cfg)
    active = np.array([state.active_gate])
    passed, collided = batch_events(state.p[None], p1, active, arrays, sim_cfg)
    oob = bool(np.any(p1[0] < arrays.lo[0]) or np.any(p1[0] > arrays.hi[0]))
    steps = state.steps + 1
    new = replace(state, p=p1[0], v=v1[0], steps=steps, active_gate=state.active_gate + int(passed[0]))
    events = StepEvents(bool(passed[0]), bool(collided[0]), oob, steps >= sim_cfg.max_steps)
    return new, events


def observe(state: DroneState, course: CourseSpec) -> np.ndarray:
    obs, _, _ = batch_observe(state.p[None], state.v[None], np.array([state.active_gate]),
                              CourseArrays.stack([course]))
    return obs[0]


def _check_course(course: CourseSpec, cfg: SimConfig):
    for g in course.gates:
        if g.diameter / 2 <= cfg.drone_radius:
            raise SimError(f"gate {g.index} (diameter {g.diameter}) is too narrow for the drone")


# -- vectorized environment ----------------------------------------------


def derive_seed(*keys: int) -> int:
    """Independent 64-bit stream seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(1, np.uint64)[0])


class VecRacingEnv:
    """``n`` independent gate-racing environments stepped in lockstep.

    Each environment draws a fresh course and spawn on every episode from a
    stream keyed by ``(seed, env index, episode count)``, so results do not
    depend on how environments are batched.
    """

    def __init__(self, n: int, level: str, sim_cfg: SimConfig, reward_fn, seed: int,
                 course_fn=generate_course):
        from .reward import PotentialTracker

        self.n = n
        self.level = level
        self.cfg = sim_cfg
        self.reward_fn = reward_fn
        self.seed = int(seed)
        self.course_fn = course_fn
        self.episode = np.zeros(n, dtype=np.int64)
        self.tracker = PotentialTracker(n)
        self._spawn = {}
        courses = [self._new_episode(i) for i in range(n)]
        for c in courses:
            _check_course(c, sim_cfg)
        self.course = CourseArrays.stack(courses)
        self.p = np.stack([self._spawn[i] for i in range(n)])
        self.v = np.zeros((n, 3))
        self.steps = np.zeros(n, dtype=np.int64)
        self.active = np.zeros(n, dtype=np.int64)
        self.ep_return = np.zeros(n)
        self.ep_gate = np.zeros(n)
        self.ep_hover = np.zeros(n)

    def _new_episode(self, i: int) -> CourseSpec:
        key = derive_seed(self.seed, i, self.episode[i])
        course = self.course_fn(self.level, key)
        rng = np.random.default_rng(derive_seed(key, 1))
        self._spawn[i] = spawn(rng, self.cfg)
        return course

    def observe(self) -> np.ndarray:
        return batch_observe(self.p, self.v, self.active, self.course)[0]

    def step(self, action):
        from .reward import RewardState

        action = np.asarray(action, dtype=float)
        if not np.all(np.isfinite(action)):
            bad = np.nonzero(~np.all(np.isfinite(action), axis=1))[0]
            raise SimError(f"non-finite action in environments {bad.tolist()}")
        p0 = self.p
        p1, v1 = integrate(p0, self.v, action, self.cfg)
        passed, collided = batch_events(p0, p1, self.active, self.course, self.cfg)
        oob = np.any(p1 < self.course.lo, axis=1) | np.any(p1 > self.course.hi, axis=1)
        self.p, self.v = p1, v1
        self.steps = self.steps + 1
        self.active = self.active + passed
        timed_out = self.steps >= self.cfg.max_steps
        done = collided | oob | timed_out

        obs, target, normal = batch_observe(self.p, self.v, self.active, self.course)
        g = self.course.n_gates
        rb = self.reward_fn(RewardState(
            p=self.p, v=self.v, target=target, normal=normal, goal=self.course.goal,
            hovering=self.active >= g, gate_passed=passed, failed=collided | oob,
        ), self.tracker)
        self.ep_return += rb.total
        self.ep_gate += rb.gate
        self.ep_hover += rb.final_hover

        info = {
            "gate_passed": passed, "collided": collided, "out_of_bounds": oob,
            "timed_out": timed_out, "done": done, "breakdown": rb,
        }
        if done.any():
            idx = np.nonzero(done)[0]
            info["terminal_obs"] = obs[idx].copy()
            info["done_idx"] = idx
            info["episode_gates"] = self.active[idx].copy()
            info["episode_return"] = self.ep_return[idx].copy()
            info["episode_gate_reward"] = self.ep_gate[idx].copy()
            info["episode_hover_reward"] = self.ep_hover[idx].copy()
            for i in idx:
                self.episode[i] += 1
                self.course.assign(i, self._new_episode(i))
                self.p[i] = self._spawn[i]
            self.v[idx] = 0.0
            self.steps[idx] = 0
            self.active[idx] = 0
            self.ep_return[idx] = 0.0
            self.ep_gate[idx] = 0.0
            self.ep_hover[idx] = 0.0
            self.tracker.reset(idx)
            obs = self.observe()
        return obs, rb.total, done, info


def max_episode_steps(cfg: SimConfig) -> int:
    return int(math.ceil(cfg.t_max / cfg.dt - 1e-9))
