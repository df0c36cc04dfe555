import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fars.course import CourseSpec, GateSpec, generate_course
from fars.ppo import make_reward_fn
from fars.reward import RewardConfig
from fars.sim import (
    OBS_DIM,
    SimConfig,
    SimError,
    VecRacingEnv,
    annulus_distance,
    collision_check,
    derive_seed,
    first_contact,
    gate_pass_check,
    integrate,
    max_episode_steps,
    observe,
    reset,
    step,
    to_gate_frame,
)

CFG = SimConfig()
R = 0.1625
FW = 0.05


def gate(yaw=0.0, diameter=0.6, center=(0.0, 0.0, 1.0)):
    return GateSpec(tuple(center), yaw, diameter, center[2], 0)


def one_gate_course(g=None):
    g = g or gate(center=(2.0, 0.0, 1.0))
    return CourseSpec((g,), (3.0, 0.0, 1.0), ((-1.0, 5.0), (-3.0, 3.0), (0.0, 3.0)))


def substep_oracle(p0, p1, g: GateSpec, r=R, fw=FW, samples=1000):
    """Dense interpolation oracle for one segment: returns (passed, collided).

    Written against raw vectors, without the library's frame helpers.
    """
    ts = np.linspace(0.0, 1.0, samples)
    pts = p0 + ts[:, None] * (p1 - p0)
    c = np.asarray(g.center)
    n = np.array([math.cos(g.yaw), math.sin(g.yaw), 0.0])
    lat = np.array([-math.sin(g.yaw), math.cos(g.yaw), 0.0])
    d = pts - c
    h, y, z = d @ n, d @ lat, d[:, 2]
    radius = g.diameter / 2
    side = h >= 0
    flips = np.nonzero(side[1:] != side[:-1])[0]
    if len(flips):
        k = flips[0]
        w = h[k] / (h[k] - h[k + 1])
        rc = math.hypot(y[k] + w * (y[k + 1] - y[k]), z[k] + w * (z[k + 1] - z[k]))
        return bool(h[k] < 0 and rc < radius - r), bool(radius - r <= rc <= radius + fw + r)
    rho = np.hypot(y, z)
    excess = np.maximum(np.maximum(radius - rho, rho - radius - fw), 0.0)
    return False, bool((np.hypot(h, excess) < r).any())


def random_segment(rng):
    g = GateSpec((0.0, 0.0, 1.0), float(rng.uniform(-1.1, 1.1)), float(rng.choice([0.45, 0.6])), 1.0, 0)
    n = g.normal
    lat = np.array([-n[1], n[0], 0.0])
    kind = rng.integers(3)
    if kind == 0:
        # straight-ish through the aperture, to exercise passes
        start = -rng.uniform(0.0, 0.1) * n + rng.uniform(-0.15, 0.15) * lat + np.array([0, 0, 1.0 + rng.uniform(-0.15, 0.15)])
        d = n + rng.normal(scale=0.3, size=3)
    else:
        start = rng.uniform(-0.3, 0.3) * n + rng.uniform(-0.6, 0.6) * lat + np.array([0, 0, 1.0 + rng.uniform(-0.6, 0.6)])
        d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return g, start, start + rng.uniform(0.0, 0.2) * d


class TestConfig:
    def test_defaults(self):
        assert (CFG.dt, CFG.t_max, CFG.a_max, CFG.v_cap, CFG.drone_radius) == (0.02, 15.0, 8.0, 4.0, 0.1625)
        assert CFG.max_steps == 750 == max_episode_steps(CFG)

    @pytest.mark.parametrize("kw", [dict(dt=0), dict(v_cap=-1), dict(t_max=15.01), dict(spawn_jitter=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)


class TestResetStep:
    def test_reset(self):
        c = generate_course("easy", 1)
        s = reset(c, CFG, 7)
        assert s.active_gate == 0 and np.linalg.norm(s.v) == 0 and s.t == 0.0 and s.phase == "racing"
        s2 = reset(c, CFG, 7)
        assert np.array_equal(s.p, s2.p)

    def test_reset_jitter_range(self):
        c = generate_course("easy", 1)
        for seed in range(1000):
            p = reset(c, CFG, seed).p
            assert np.all(np.abs(p - np.array([0.0, 0.0, 1.0])) <= 0.05)

    def test_reset_rejects_narrow_gate(self):
        with pytest.raises(SimError):
            reset(one_gate_course(gate(diameter=0.3, center=(2, 0, 1))), CFG, 0)

    def test_statics(self):
        c = one_gate_course()
        s = reset(c, CFG, 0)
        s2, ev = step(s, np.zeros(3), c, CFG)
        assert np.array_equal(s2.p, s.p) and not (ev.gate_passed or ev.collided or ev.done)

    def test_euler(self):
        c = one_gate_course()
        s = replace(reset(c, CFG, 0), v=np.array([1.0, 0.0, 0.0]))
        s2, _ = step(s, np.zeros(3), c, CFG)
        assert s2.p[0] - s.p[0] == pytest.approx(0.02, abs=1e-15)

    def test_timeout(self):
        c = one_gate_course()
        s = reset(c, CFG, 0)
        for k in range(750):
            s, ev = step(s, np.zeros(3), c, CFG)
            assert ev.timed_out == (k == 749)
        assert ev.done and s.t == pytest.approx(15.0, abs=1e-12)

    def test_non_finite_action(self):
        c = one_gate_course()
        with pytest.raises(SimError):
            step(reset(c, CFG, 0), np.array([np.nan, 0, 0]), c, CFG)

    def test_fly_through_then_hover(self):
        c = one_gate_course()
        s = replace(reset(c, CFG, 0), p=np.array([0.0, 0.0, 1.0]))
        passed = 0
        for _ in range(60):
            s, ev = step(s, np.array([8.0, 0.0, 0.0]), c, CFG)
            passed += ev.gate_passed
            assert not ev.collided
        assert passed == 1 and s.active_gate == 1 and s.phase == "hovering"
        assert observe(s, c)[12] == 1.0

    def test_hit_frame_terminates(self):
        c = one_gate_course()
        s = replace(reset(c, CFG, 0), p=np.array([0.0, 0.3, 1.0]))
        for _ in range(100):
            s, ev = step(s, np.array([8.0, 0.0, 0.0]), c, CFG)
            if ev.done:
                break
        assert ev.collided and s.active_gate == 0

    def test_out_of_bounds(self):
        c = one_gate_course()
        s = reset(c, CFG, 0)
        for _ in range(200):
            s, ev = step(s, np.array([0.0, 0.0, -8.0]), c, CFG)
            if ev.done:
                break
        assert ev.out_of_bounds and not ev.collided

    @given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=80))
    @settings(max_examples=40, deadline=None)
    def test_speed_cap_and_gate_monotone(self, actions):
        c = generate_course("easy", 5)
        s = reset(c, CFG, 0)
        for a in actions:
            prev = s.active_gate
            s, ev = step(s, np.array(a), c, CFG)
            assert np.linalg.norm(s.v) <= CFG.v_cap + 1e-12
            assert prev <= s.active_gate <= prev + 1
            if ev.done:
                break

    def test_integrate_clamps_per_axis(self):
        p, v = integrate(np.zeros((1, 3)), np.zeros((1, 3)), np.array([[100.0, -100.0, 1.0]]), CFG)
        assert np.allclose(v, [[0.16, -0.16, 0.02]], atol=1e-15)


class TestGeometry:
    def test_through_center(self):
        g = gate()
        assert gate_pass_check([-0.1, 0, 1], [0.1, 0, 1], g)
        assert not collision_check([-0.1, 0, 1], [0.1, 0, 1], g)

    def test_backwards_is_not_a_pass(self):
        assert not gate_pass_check([0.1, 0, 1], [-0.1, 0, 1], gate())

    def test_parallel(self):
        g = gate()
        assert not gate_pass_check([-0.5, -0.2, 1], [-0.5, 0.2, 1], g)
        assert not collision_check([-0.5, -0.2, 1], [-0.5, 0.2, 1], g)

    def test_rim_boundary_inclusive(self):
        g = gate()
        y = 0.3 - R
        assert collision_check([-0.1, y, 1], [0.1, y, 1], g)
        assert not gate_pass_check([-0.1, y, 1], [0.1, y, 1], g)
        y = 0.3 + FW + R
        assert collision_check([-0.1, y, 1], [0.1, y, 1], g)
        assert not collision_check([-0.1, y + 1e-9, 1], [0.1, y + 1e-9, 1], g)

    def test_side_contact_without_crossing(self):
        g = gate()
        # slides along the face, 0.1 m in front of the frame
        assert collision_check([-0.1, 0.9, 1.3], [-0.1, 0.2, 1.3], g)

    def test_annulus_distance(self):
        assert annulus_distance([0, 0.3, 0], 0.3, 0.35) == 0.0
        assert annulus_distance([0.2, 0, 0], 0.3, 0.35) == pytest.approx(math.hypot(0.2, 0.3))
        assert annulus_distance([0, 0.5, 0], 0.3, 0.35) == pytest.approx(0.15)

    def test_first_contact_parameter(self):
        s = first_contact(np.array([-1.0, 0.32, 0.0]), np.array([1.0, 0.32, 0.0]), 0.3, 0.35, 0.1)
        assert s == pytest.approx(0.45, abs=1e-9)

    def test_gate_frame(self):
        q = to_gate_frame([1.0, 1.0, 2.0], [1.0, 0.0, 1.0], math.pi / 2)
        assert np.allclose(q, [1.0, 0.0, 1.0], atol=1e-15)

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(2024)
        disagreements, passes, hits = 0, 0, 0
        for _ in range(2000):
            g, p0, p1 = random_segment(rng)
            got = (gate_pass_check(p0, p1, g), collision_check(p0, p1, g))
            disagreements += got != substep_oracle(p0, p1, g)
            passes += got[0]
            hits += got[1]
        assert disagreements == 0
        assert passes > 100 and hits > 100


def in_frame(vec, g: GateSpec):
    n = g.normal
    return np.array([vec @ n, vec @ np.array([-n[1], n[0], 0.0]), vec[2]])


class TestObserve:
    def test_at_gate_center(self):
        c = generate_course("easy", 4)
        s = replace(reset(c, CFG, 0), p=np.asarray(c.gates[0].center, dtype=float))
        obs = observe(s, c)
        assert obs.shape == (OBS_DIM,)
        assert np.allclose(obs[:3], 0.0, atol=1e-15)
        assert np.allclose(obs[6:9], c.gates[0].normal)
        assert np.allclose(obs[9:12], in_frame(np.subtract(c.gates[1].center, c.gates[0].center), c.gates[0]))
        assert obs[12] == 0.0

    def test_velocity_in_gate_frame(self):
        g = gate(yaw=math.pi / 2, center=(2.0, 0.0, 1.0))
        c = one_gate_course(g)
        s = replace(reset(c, CFG, 0), v=np.array([0.0, 2.0, -1.0]))
        assert np.allclose(observe(s, c)[3:6], [2.0, 0.0, -1.0], atol=1e-15)

    def test_hovering_points_at_goal(self):
        c = generate_course("easy", 4)
        s = replace(reset(c, CFG, 0), active_gate=c.n_gates)
        obs = observe(s, c)
        goal_rel = np.subtract(c.goal, s.p)
        assert obs[12] == 1.0
        assert np.allclose(obs[9:12], in_frame(goal_rel, c.gates[-1]))
        assert np.linalg.norm(obs[:3]) == pytest.approx(np.linalg.norm(goal_rel))

    def test_translation_invariance(self):
        c = generate_course("medium", 8)
        shift = np.array([3.5, -1.25, 0.75])
        moved = CourseSpec(tuple(replace(g, center=tuple(np.add(g.center, shift))) for g in c.gates),
                           tuple(np.add(c.goal, shift)), c.bounds)
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = replace(reset(c, CFG, 0), p=rng.uniform(-1, 3, 3), v=rng.normal(size=3),
                        active_gate=int(rng.integers(0, c.n_gates + 1)))
            a = observe(s, c)
            b = observe(replace(s, p=s.p + shift), moved)
            assert np.allclose(a, b, atol=1e-12)


class TestVecEnv:
    def make(self, n=8, seed=3):
        return VecRacingEnv(n, "easy", CFG, make_reward_fn(RewardConfig()), seed)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        actions = rng.normal(scale=8, size=(300, 8, 3))
        runs = []
        for _ in range(2):
            env = self.make()
            trace = [env.observe()]
            for a in actions:
                obs, r, d, _ = env.step(a)
                trace.extend([obs, r, d])
            runs.append(trace)
        assert all(np.array_equal(x, y) for x, y in zip(*runs))

    def test_batch_independence(self):
        """Environment i behaves the same whatever the batch size."""
        rng = np.random.default_rng(1)
        actions = rng.normal(scale=8, size=(200, 4, 3))
        small, big = self.make(2), self.make(4)
        for a in actions:
            o1, r1, _, _ = small.step(a[:2])
            o2, r2, _, _ = big.step(a)
            assert np.array_equal(o1, o2[:2]) and np.array_equal(r1, r2[:2])

    def test_episode_bookkeeping(self):
        env = self.make(4)
        done_seen = 0
        for _ in range(800):
            _, _, done, info = env.step(np.zeros((4, 3)))
            if done.any():
                done_seen += done.sum()
                assert np.all(info["timed_out"][info["done_idx"]])
                assert info["terminal_obs"].shape == (done.sum(), OBS_DIM)
        assert done_seen == 4
        assert np.all(env.steps == 50)

    def test_rejects_non_finite(self):
        env = self.make(2)
        with pytest.raises(SimError):
            env.step(np.array([[0, 0, 0], [np.inf, 0, 0]]))

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(2, 1)


def waypoint_flight(level: str, seed: int) -> int:
    """Gates passed by a PD controller that stops in front of each gate, then flies through along its normal."""
    course = generate_course(level, seed)
    s = reset(course, CFG, seed)
    through = False
    for _ in range(CFG.max_steps):
        if s.active_gate >= course.n_gates:
            wp = np.array(course.goal)
        else:
            g = course.gates[s.active_gate]
            wp = np.array(g.center) + (0.5 if through else -0.6) * g.normal
            if not through and np.linalg.norm(s.p - wp) < 0.04 and np.linalg.norm(s.v) < 0.2:
                through = True
        before = s.active_gate
        s, ev = step(s, np.clip(12 * (wp - s.p) - 6 * s.v, -8, 8), course, CFG)
        through = through and s.active_gate == before
        if ev.collided or ev.out_of_bounds:
            break
    return s.active_gate


@pytest.mark.parametrize("level,minimum,mean", [("easy", 6, 6.0), ("hard", 1, 4.0)])
def test_courses_are_flyable(level, minimum, mean):
    gates = [waypoint_flight(level, seed) for seed in range(20)]
    assert min(gates) >= minimum and np.mean(gates) >= mean
