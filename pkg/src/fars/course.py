"""Seeded zigzag gate courses at three difficulty levels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEVELS = ("easy", "medium", "hard")
LATERAL_OFFSETS = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
SPAWN = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class GateSpec:
    center: tuple[float, float, float]
    yaw: float
    diameter: float
    height: float
    index: int

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])

    def to_dict(self) -> dict:
        return {"center": list(self.center), "yaw": self.yaw, "diameter": self.diameter, "height": self.height}


@dataclass(frozen=True)
class DifficultyParams:
    n_gates: int
    lateral_offsets: tuple[float, ...]
    lateral_jitter: float
    longitudinal_spacings: tuple[float, ...]
    heights: tuple[float, ...]
    diameter: float
    yaw_range: float  # radians, symmetric


@dataclass(frozen=True)
class CourseSpec:
    gates: tuple[GateSpec, ...]
    goal: tuple[float, float, float]
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    @property
    def n_gates(self) -> int:
        return len(self.gates)

    def to_dict(self) -> dict:
        return {
            "gates": [g.to_dict() for g in self.gates],
            "goal": list(self.goal),
            "bounds": [list(b) for b in self.bounds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "CourseSpec":
        gates = tuple(
            GateSpec(tuple(float(c) for c in g["center"]), float(g["yaw"]), float(g["diameter"]),
                     float(g["height"]), i)
            for i, g in enumerate(data["gates"])
        )
        return cls(gates, tuple(float(c) for c in data["goal"]),
                   tuple(tuple(float(v) for v in b) for b in data["bounds"]))

    @classmethod
    def from_json(cls, text: str) -> "CourseSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "CourseSpec":
        return cls.from_json(Path(path).read_text())


_EASY = DifficultyParams(
    n_gates=6,
    lateral_offsets=LATERAL_OFFSETS,
    lateral_jitter=0.1,
    longitudinal_spacings=(1.5, 1.75, 2.0),
    heights=(1.0,),
    diameter=0.60,
    yaw_range=math.radians(10.0),
)
_MEDIUM = DifficultyParams(
    n_gates=8,
    lateral_offsets=LATERAL_OFFSETS,
    lateral_jitter=0.1,
    longitudinal_spacings=(1.0, 1.25, 1.5),
    heights=(0.5, 1.0, 1.5, 2.0),
    diameter=0.60,
    yaw_range=math.radians(10.0),
)
_HARD = DifficultyParams(
    n_gates=8,
    lateral_offsets=LATERAL_OFFSETS,
    lateral_jitter=0.1,
    longitudinal_spacings=(1.0, 1.25, 1.5),
    heights=(0.5, 1.0, 1.5, 2.0),
    diameter=0.45,
    yaw_range=math.radians(60.0),
)


def difficulty_params(level: str) -> DifficultyParams:
    try:
        return {"easy": _EASY, "medium": _MEDIUM, "hard": _HARD}[level]
    except KeyError:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}") from None


def generate_course(level: str, seed: int) -> CourseSpec:
    """Zigzag course along +x; the first and last gates sit on y = 0.

    Pure function of ``(level, seed)``.
    """
    prm = difficulty_params(level)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    n = prm.n_gates
    spacings = rng.choice(prm.longitudinal_spacings, size=n)
    offsets = rng.choice(prm.lateral_offsets, size=n)
    jitter = rng.uniform(-prm.lateral_jitter, prm.lateral_jitter, size=n)
    heights = rng.choice(prm.heights, size=n)
    yaws = rng.uniform(-prm.yaw_range, prm.yaw_range, size=n)
    first_side = 1.0 if rng.random() < 0.5 else -1.0

    xs = SPAWN[0] + np.cumsum(spacings)
    gates = []
    for i in range(n):
        if i == 0 or i == n - 1:
            y = 0.0
        else:
            side = first_side if i % 2 == 1 else -first_side
            y = side * (offsets[i] + jitter[i])
        h = float(heights[i])
        gates.append(GateSpec((float(xs[i]), float(y), h), float(yaws[i]), prm.diameter, h, i))

    last = gates[-1]
    reach = float(np.mean(prm.longitudinal_spacings))
    goal = tuple(float(c) for c in np.asarray(last.center) + reach * last.normal)
    bounds = ((-1.0, float(xs[-1]) + 3.0), (-3.0, 3.0), (0.0, 3.0))
    return CourseSpec(tuple(gates), goal, bounds)


def validate_course(course: CourseSpec) -> list[str]:
    """Every broken course invariant, as human-readable strings."""
    out = []
    gates = course.gates
    if not gates:
        return ["course has no gates"]
    for g in gates:
        if not g.diameter > 0:
            out.append(f"gate {g.index}: non-positive diameter {g.diameter}")
        if not g.height > 0:
            out.append(f"gate {g.index}: non-positive height {g.height}")
    for g in (gates[0], gates[-1]):
        if g.center[1] != 0.0:
            out.append(f"gate {g.index}: endpoint gate off the x-axis (y={g.center[1]})")
    inner = gates[1:-1]
    for a, b in zip(inner, inner[1:]):
        if not a.center[1] * b.center[1] < 0:
            out.append(f"gates {a.index}/{b.index}: lateral placement does not alternate")
    for g in inner:
        if g.center[1] == 0.0:
            out.append(f"gate {g.index}: intermediate gate on the x-axis")
    for a, b in zip(gates, gates[1:]):
        if not b.center[0] > a.center[0]:
            out.append(f"gates {a.index}/{b.index}: x does not increase")
    if not course.goal[0] > gates[-1].center[0]:
        out.append("goal is not beyond the last gate along +x")
    return out
