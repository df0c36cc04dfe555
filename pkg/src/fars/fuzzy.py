"""Two-input fuzzy inference: Mamdani (centroid) and zero-order Sugeno.

All inference entry points accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ENGINES = ("mamdani", "sugeno")
AND_OPERATORS = ("min", "product")


class FuzzyConfigError(ValueError):
    """Raised for malformed fuzzy-system definitions."""


@dataclass(frozen=True)
class MembershipFunction:
    """Triangular ``(a, b, c)`` or trapezoidal ``(a, b, c, d)`` membership.

    Triangles are stored as trapezoids with a single-point plateau. A shoulder
    is a triangle degenerate at one end, e.g. ``triangular(0, 0, 0.5)``.
    """

    shape: str
    params: tuple[float, ...]

    def __post_init__(self):
        n = {"triangular": 3, "trapezoidal": 4}.get(self.shape)
        if n is None:
            raise FuzzyConfigError(f"unknown membership shape {self.shape!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != n:
            raise FuzzyConfigError(f"{self.shape} needs {n} parameters, got {len(params)}")
        if any(not np.isfinite(p) for p in params):
            raise FuzzyConfigError(f"non-finite parameters {params}")
        if any(b < a for a, b in zip(params, params[1:])):
            raise FuzzyConfigError(f"parameters must be non-decreasing, got {params}")
        object.__setattr__(self, "params", params)

    @classmethod
    def triangular(cls, a, b, c):
        return cls("triangular", (a, b, c))

    @classmethod
    def trapezoidal(cls, a, b, c, d):
        return cls("trapezoidal", (a, b, c, d))

    @property
    def corners(self) -> tuple[float, float, float, float]:
        p = self.params
        return (p[0], p[1], p[1], p[2]) if self.shape == "triangular" else p

    @property
    def support(self) -> tuple[float, float]:
        a, _, _, d = self.corners
        return a, d

    def __call__(self, x):
        a, b, c, d = self.corners
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            rising = (x >= a) & (x < b)
            out = np.where(rising, (x - a) / (b - a) if b > a else 1.0, out)
            falling = (x > c) & (x <= d)
            out = np.where(falling, (d - x) / (d - c) if d > c else 1.0, out)
        out = np.where((x >= b) & (x <= c), 1.0, out)
        return out if out.ndim else float(out)


def membership_eval(mf: MembershipFunction, x):
    return mf(x)


@dataclass(frozen=True)
class LinguisticVariable:
    name: str
    universe: tuple[float, float]
    terms: tuple[tuple[str, MembershipFunction], ...]

    def __post_init__(self):
        lo, hi = (float(u) for u in self.universe)
        if not lo < hi:
            raise FuzzyConfigError(f"{self.name}: empty universe [{lo}, {hi}]")
        object.__setattr__(self, "universe", (lo, hi))
        terms = tuple((str(label), mf) for label, mf in self.terms)
        if not terms:
            raise FuzzyConfigError(f"{self.name}: no terms")
        labels = [t[0] for t in terms]
        if len(set(labels)) != len(labels):
            raise FuzzyConfigError(f"{self.name}: duplicate term labels {labels}")
        for label, mf in terms:
            a, d = mf.support
            if a < lo or d > hi:
                raise FuzzyConfigError(f"{self.name}.{label}: support [{a}, {d}] leaves universe")
        object.__setattr__(self, "terms", terms)
        # cover check on a fine grid plus every breakpoint
        probe = np.unique(np.concatenate([
            np.linspace(lo, hi, 1001),
            [c for _, mf in terms for c in mf.corners],
        ]))
        if np.any(self.fuzzify(probe).max(axis=-1) <= 0.0):
            raise FuzzyConfigError(f"{self.name}: terms do not cover the universe")

    @property
    def labels(self) -> list[str]:
        return [t[0] for t in self.terms]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise FuzzyConfigError(f"{self.name}: unknown term {label!r}") from None

    def fuzzify(self, x):
        """Membership degrees of ``x`` (clamped into the universe), one per term on the last axis."""
        x = np.clip(np.asarray(x, dtype=float), *self.universe)
        return np.stack([np.asarray(mf(x), dtype=float) for _, mf in self.terms], axis=-1)


def fuzzify(var: LinguisticVariable, x):
    return var.fuzzify(x)


@dataclass(frozen=True)
class FuzzyRule:
    """``IF velocity is A AND distance is B THEN reward is C`` (or the constant)."""

    antecedent: tuple[str, ...]
    consequent: str
    constant: float

    def __post_init__(self):
        if not 0.0 <= self.constant <= 1.0:
            raise FuzzyConfigError(f"Sugeno constant {self.constant} outside [0, 1]")


def _and(op: str, a, b):
    if op == "min":
        return np.minimum(a, b)
    if op == "product":
        return a * b
    raise FuzzyConfigError(f"unknown AND operator {op!r}")


def firing_strength(rule_degrees: Sequence, and_operator: str = "min"):
    """Combine the antecedent degrees of one rule with the configured t-norm."""
    out = np.asarray(rule_degrees[0], dtype=float)
    for d in rule_degrees[1:]:
        out = _and(and_operator, out, np.asarray(d, dtype=float))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FuzzySystem:
    """Velocity/distance reward system over normalized inputs.

    ``inputs`` is ``(velocity, distance)``; rule antecedents follow that order.
    """

    inputs: tuple[LinguisticVariable, LinguisticVariable]
    output: LinguisticVariable
    rules: tuple[FuzzyRule, ...]
    mamdani_and: str = "min"
    sugeno_and: str = "product"
    aggregation: str = "max"
    defuzz_resolution: int = 201
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.inputs) != 2:
            raise FuzzyConfigError("exactly two input variables are supported")
        for op in (self.mamdani_and, self.sugeno_and):
            if op not in AND_OPERATORS:
                raise FuzzyConfigError(f"unknown AND operator {op!r}")
        if self.aggregation != "max":
            raise FuzzyConfigError(f"unsupported aggregation {self.aggregation!r}")
        if int(self.defuzz_resolution) < 2:
            raise FuzzyConfigError("defuzz_resolution must be >= 2")
        seen = set()
        for rule in self.rules:
            if len(rule.antecedent) != 2:
                raise FuzzyConfigError(f"rule {rule} must name one term per input")
            key = tuple(var.index(lbl) for var, lbl in zip(self.inputs, rule.antecedent))
            if key in seen:
                raise FuzzyConfigError(f"duplicate rule for {rule.antecedent}")
            seen.add(key)
            self.output.index(rule.consequent)
        expected = len(self.inputs[0].terms) * len(self.inputs[1].terms)
        if len(seen) != expected:
            raise FuzzyConfigError(f"rule grid incomplete: {len(seen)} of {expected} rules")

        v_idx = np.array([self.inputs[0].index(r.antecedent[0]) for r in self.rules])
        d_idx = np.array([self.inputs[1].index(r.antecedent[1]) for r in self.rules])
        z = np.linspace(*self.output.universe, int(self.defuzz_resolution))
        out_mf = np.stack([self.output.terms[self.output.index(r.consequent)][1](z) for r in self.rules])
        self._cache.update(
            v_idx=v_idx, d_idx=d_idx, z=z, out_mf=out_mf,
            constants=np.array([r.constant for r in self.rules]),
        )

    def strengths(self, v_hat, d_hat, and_operator: str):
        dv = self.inputs[0].fuzzify(v_hat)
        dd = self.inputs[1].fuzzify(d_hat)
        dv, dd = np.broadcast_arrays(dv[..., :, None], dd[..., None, :])
        c = self._cache
        return _and(and_operator, dv[..., c["v_idx"], c["d_idx"]], dd[..., c["v_idx"], c["d_idx"]])

    def mamdani(self, v_hat, d_hat):
        w = self.strengths(v_hat, d_hat, self.mamdani_and)
        c = self._cache
        agg = np.minimum(w[..., :, None], c["out_mf"]).max(axis=-2)
        area = agg.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            centroid = (agg * c["z"]).sum(axis=-1) / area
        mid = 0.5 * sum(self.output.universe)
        out = np.where(area > 0.0, centroid, mid)
        return out if out.ndim else float(out)

    def sugeno(self, v_hat, d_hat):
        w = self.strengths(v_hat, d_hat, self.sugeno_and)
        out = (w * self._cache["constants"]).sum(axis=-1) / w.sum(axis=-1)
        return out if out.ndim else float(out)

    def infer(self, engine: str, v_hat, d_hat):
        if engine == "mamdani":
            return self.mamdani(v_hat, d_hat)
        if engine == "sugeno":
            return self.sugeno(v_hat, d_hat)
        raise FuzzyConfigError(f"unknown engine {engine!r}")

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        def var(v: LinguisticVariable):
            return {
                "name": v.name,
                "universe": list(v.universe),
                "terms": [{"label": lbl, "shape": mf.shape, "params": list(mf.params)} for lbl, mf in v.terms],
            }

        return {
            "inputs": [var(v) for v in self.inputs],
            "output": var(self.output),
            "rules": [
                {"if": list(r.antecedent), "then": r.consequent, "constant": r.constant}
                for r in self.rules
            ],
            "mamdani_and": self.mamdani_and,
            "sugeno_and": self.sugeno_and,
            "aggregation": self.aggregation,
            "defuzz_resolution": int(self.defuzz_resolution),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FuzzySystem":
        try:
            def var(d):
                return LinguisticVariable(
                    d["name"], tuple(d["universe"]),
                    tuple((t["label"], MembershipFunction(t["shape"], tuple(t["params"]))) for t in d["terms"]),
                )

            return cls(
                inputs=tuple(var(v) for v in data["inputs"]),
                output=var(data["output"]),
                rules=tuple(FuzzyRule(tuple(r["if"]), r["then"], float(r["constant"])) for r in data["rules"]),
                mamdani_and=data.get("mamdani_and", "min"),
                sugeno_and=data.get("sugeno_and", "product"),
                aggregation=data.get("aggregation", "max"),
                defuzz_resolution=int(data.get("defuzz_resolution", 201)),
            )
        except (KeyError, TypeError) as exc:
            raise FuzzyConfigError(f"malformed fuzzy system document: {exc!r}") from exc

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def load(cls, path) -> "FuzzySystem":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FuzzyConfigError(f"{path}: {exc}") from exc


def mamdani_infer(sys: FuzzySystem, v_hat, d_hat):
    return sys.mamdani(v_hat, d_hat)


def sugeno_infer(sys: FuzzySystem, v_hat, d_hat):
    return sys.sugeno(v_hat, d_hat)


def unit_partition(labels: Sequence[str]) -> tuple[tuple[str, MembershipFunction], ...]:
    """Evenly spaced, half-overlapping triangles on [0, 1] with shoulders at the ends."""
    n = len(labels)
    apex = np.linspace(0.0, 1.0, n)
    step = apex[1] - apex[0]
    terms = []
    for i, label in enumerate(labels):
        a = max(apex[i] - step, 0.0)
        c = min(apex[i] + step, 1.0)
        terms.append((label, MembershipFunction.triangular(a, apex[i], c)))
    return tuple(terms)


VELOCITY_TERMS = ("slow", "medium", "fast")
DISTANCE_TERMS = ("near", "medium", "far")
OUTPUT_TERMS = ("very_low", "low", "medium", "high", "very_high")

# rows: distance near -> far, columns: velocity slow -> fast.
# Each row maps onto its own output terms; sharing a term between two
# distance rows makes the max-aggregated Mamdani surface non-monotone in d.
DEFAULT_CONSTANTS = (
    (1.0, 0.75, 0.75),
    (0.5, 0.5, 0.5),
    (0.0, 0.25, 0.25),
)


def nearest_term(value: float, var: LinguisticVariable) -> str:
    """Output term whose apex (plateau midpoint) is closest to ``value``; ties go to the lower term."""
    mids = [0.5 * (mf.corners[1] + mf.corners[2]) for _, mf in var.terms]
    return var.labels[int(np.argmin([abs(m - value) for m in mids]))]


def default_system(constants=DEFAULT_CONSTANTS, **options) -> FuzzySystem:
    """The 3x3 velocity/distance rule base used by the reward stack."""
    velocity = LinguisticVariable("velocity", (0.0, 1.0), unit_partition(VELOCITY_TERMS))
    distance = LinguisticVariable("distance", (0.0, 1.0), unit_partition(DISTANCE_TERMS))
    output = LinguisticVariable("reward", (0.0, 1.0), unit_partition(OUTPUT_TERMS))
    rules = []
    for i, d_label in enumerate(DISTANCE_TERMS):
        for j, v_label in enumerate(VELOCITY_TERMS):
            c = float(constants[i][j])
            rules.append(FuzzyRule((v_label, d_label), nearest_term(c, output), c))
    return FuzzySystem((velocity, distance), output, tuple(rules), **options)


def surface_grid(sys: FuzzySystem, engine: str, nx: int, ny: int) -> np.ndarray:
    """Crisp rewards on an ``nx`` x ``ny`` grid; row i is v_hat[i], column j is d_hat[j]."""
    if nx < 2 or ny < 2:
        raise ValueError("surface grid needs at least 2 points per axis")
    v = np.linspace(0.0, 1.0, nx)
    d = np.linspace(0.0, 1.0, ny)
    vv, dd = np.meshgrid(v, d, indexing="ij")
    return np.asarray(sys.infer(engine, vv, dd), dtype=float)


def surface_rows(grid: np.ndarray):
    """Yield ``(v_hat, d_hat, reward)`` in row-major order."""
    nx, ny = grid.shape
    v = np.linspace(0.0, 1.0, nx)
    d = np.linspace(0.0, 1.0, ny)
    for i in range(nx):
        for j in range(ny):
            yield v[i], d[j], grid[i, j]
