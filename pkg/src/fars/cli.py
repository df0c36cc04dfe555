"""Command-line entry point: ``train``, ``eval``, ``surface`` and ``course``.

Exit codes: 0 success, 2 configuration error, 3 checkpoint error, 4 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .course import LEVELS, CourseSpec, generate_course
from .fuzzy import ENGINES, FuzzyConfigError, FuzzySystem, default_system, surface_grid, surface_rows
from .ppo import CheckpointError, PPOConfig, STATS_COLUMNS, TrainingAbort, fmt, load_checkpoint, policy_forward, train
from .reward import MODES, RewardConfig, RewardConfigError
from .sim import (
    CourseArrays,
    SimConfig,
    SimError,
    _check_course,
    batch_events,
    batch_observe,
    derive_seed,
    integrate,
    spawn,
)

log = logging.getLogger("fars")

EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_RUNTIME = 2, 3, 4
DEFAULT_SEEDS = (5, 8, 16, 32, 36)
TRACE_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "active_gate",
                 "gate_passed", "collided", "out_of_bounds", "timed_out")


class ConfigError(ValueError):
    pass


# -- experiment configuration ---------------------------------------------


@dataclass
class ExperimentConfig:
    level: str = "easy"
    reward_mode: str = "pfbrs"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    fuzzy_system_path: str | None = None
    output_dir: str = "runs"

    def to_text(self) -> str:
        lines = [f"level={self.level}", f"reward_mode={self.reward_mode}",
                 "seeds=" + ",".join(str(s) for s in self.seeds)]
        if self.fuzzy_system_path:
            lines.append(f"fuzzy_system_path={self.fuzzy_system_path}")
        lines.append(f"output_dir={self.output_dir}")
        for section in ("ppo", "reward", "sim"):
            obj = getattr(self, section)
            lines += [f"{section}.{f.name}={getattr(obj, f.name)}" for f in fields(obj)]
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment, dotted keys address sections."""
    top: dict = {}
    sections: dict[str, dict] = {"ppo": {}, "reward": {}, "sim": {}}
    defaults = {"ppo": PPOConfig(), "reward": RewardConfig(), "sim": SimConfig()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections:
                raise ConfigError(f"{key}: unknown section {section!r}")
            names = {f.name for f in fields(defaults[section])}
            if name not in names:
                raise ConfigError(f"{key}: unknown key")
            sections[section][name] = _coerce(key, raw, getattr(defaults[section], name))
        elif key == "seeds":
            try:
                top["seeds"] = tuple(int(s, 0) for s in raw.split(",") if s.strip())
            except ValueError:
                raise ConfigError(f"seeds: cannot parse {raw!r}") from None
            if not top["seeds"]:
                raise ConfigError("seeds: list is empty")
        elif key in ("level", "reward_mode", "fuzzy_system_path", "output_dir"):
            top[key] = raw
        else:
            raise ConfigError(f"{key}: unknown key")

    level = top.get("level", "easy")
    if level not in LEVELS:
        raise ConfigError(f"level: expected one of {LEVELS}, got {level!r}")
    mode = top.get("reward_mode", "pfbrs")
    if mode not in MODES:
        raise ConfigError(f"reward_mode: expected one of {MODES}, got {mode!r}")
    sections["reward"].setdefault("mode", mode)
    if sections["reward"]["mode"] != mode:
        raise ConfigError("reward.mode: disagrees with reward_mode")
    sections["reward"].setdefault("gamma", sections["ppo"].get("gamma", defaults["ppo"].gamma))
    sections["reward"].setdefault("dt", sections["sim"].get("dt", defaults["sim"].dt))
    built = {}
    for name, cls in (("ppo", PPOConfig), ("reward", RewardConfig), ("sim", SimConfig)):
        try:
            built[name] = cls(**sections[name])
        except (ValueError, RewardConfigError) as exc:
            raise ConfigError(str(exc)) from None
    return ExperimentConfig(level=level, reward_mode=mode, seeds=top.get("seeds", DEFAULT_SEEDS),
                            fuzzy_system_path=top.get("fuzzy_system_path"),
                            output_dir=top.get("output_dir", "runs"), **built)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, str(path))
    override = os.environ.get("FARS_OUTPUT_DIR")
    if override:
        cfg.output_dir = override
    return cfg


def _load_fuzzy(path) -> FuzzySystem:
    if not path:
        return default_system()
    try:
        return FuzzySystem.load(path)
    except (OSError, FuzzyConfigError) as exc:
        raise ConfigError(f"fuzzy_system_path: {exc}") from None


def _output_dir(arg) -> Path:
    return Path(arg or os.environ.get("FARS_OUTPUT_DIR") or ".")


# -- train ------------------------------------------------------------------


def merge_stats(histories: list[list[dict]]) -> tuple[list[str], list[list]]:
    """Per-epoch mean, min and max of every statistic across seeds."""
    metrics = [c for c in STATS_COLUMNS if c != "epoch"]
    header = ["epoch", "seeds"] + [f"{m}_{k}" for m in metrics for k in ("mean", "min", "max")]
    rows = []
    n_epochs = min((len(h) for h in histories), default=0)
    for e in range(n_epochs):
        row = [histories[0][e]["epoch"], len(histories)]
        for m in metrics:
            vals = np.array([h[e][m] for h in histories], dtype=float)
            finite = vals[np.isfinite(vals)]
            if finite.size:
                row += [finite.mean(), finite.min(), finite.max()]
            else:
                row += [float("nan")] * 3
        rows.append(row)
    return header, rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def run_experiment(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    fuzzy = _load_fuzzy(cfg.fuzzy_system_path) if cfg.reward.engine else None
    histories = []
    for seed in cfg.seeds:
        ppo = PPOConfig(**{**{f.name: getattr(cfg.ppo, f.name) for f in fields(cfg.ppo)}, "seed": seed})
        log.info("training %s/%s seed %d", cfg.level, cfg.reward_mode, seed)
        _, history = train(cfg.level, cfg.reward_mode, ppo, reward_cfg=cfg.reward, sim_cfg=cfg.sim,
                           fuzzy_system=fuzzy, out_dir=out / f"seed_{seed}",
                           experiment={"seeds": list(cfg.seeds)})
        histories.append(history)
    header, rows = merge_stats(histories)
    write_csv(out / "merged.csv", header, rows)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = run_experiment(cfg)
    print(out)
    return 0


# -- eval -------------------------------------------------------------------


def rollout_episodes(params, level: str, seed: int, n_episodes: int, sim_cfg: SimConfig,
                     action_scale: float, batch: int = 256, trace_dir=None):
    """Roll out the mean action on ``n_episodes`` fresh courses; returns gates passed per episode.

    Episode ``i`` uses course seed ``derive_seed(seed, i)``, so results do not
    depend on the batch size.
    """
    gates = np.zeros(n_episodes, dtype=np.int64)
    for start in range(0, n_episodes, batch):
        ids = range(start, min(start + batch, n_episodes))
        courses, spawns = [], []
        for i in ids:
            key = derive_seed(seed, i)
            course = generate_course(level, key)
            _check_course(course, sim_cfg)
            courses.append(course)
            spawns.append(spawn(np.random.default_rng(derive_seed(key, 1)), sim_cfg))
        arrays = CourseArrays.stack(courses)
        n = len(courses)
        p, v = np.stack(spawns), np.zeros((n, 3))
        active = np.zeros(n, dtype=np.int64)
        alive = np.ones(n, dtype=bool)
        traces = [[] for _ in range(n)] if trace_dir is not None else None
        for k in range(1, sim_cfg.max_steps + 1):
            obs, _, _ = batch_observe(p, v, active, arrays)
            mean, _, _ = policy_forward(params, obs)
            p1, v1 = integrate(p, v, action_scale * mean, sim_cfg)
            passed, collided = batch_events(p, p1, active, arrays, sim_cfg)
            oob = np.any(p1 < arrays.lo, axis=1) | np.any(p1 > arrays.hi, axis=1)
            passed &= alive
            p = np.where(alive[:, None], p1, p)
            v = np.where(alive[:, None], v1, v)
            active = active + passed
            timed_out = np.full(n, k >= sim_cfg.max_steps)
            if traces is not None:
                for j in np.nonzero(alive)[0]:
                    traces[j].append([k * sim_cfg.dt, *p[j], *v[j], active[j], int(passed[j]),
                                      int(collided[j]), int(oob[j]), int(timed_out[j])])
            alive &= ~(collided | oob | timed_out)
            if not alive.any():
                break
        gates[start:start + n] = active
        if traces is not None:
            for j, i in enumerate(ids):
                write_csv(Path(trace_dir) / f"episode_{i:05d}.csv", TRACE_COLUMNS, traces[j])
    return gates


def success_rates(gates, n_gates: int) -> np.ndarray:
    """Fraction of episodes that passed gate k, for k = 0..n_gates-1."""
    gates = np.asarray(gates)
    return np.array([(gates > k).mean() for k in range(n_gates)])


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    params, doc = load_checkpoint(args.checkpoint)
    conf = doc.get("config", {})
    sim_cfg = SimConfig(**conf["sim"]) if "sim" in conf else SimConfig()
    action_scale = float(conf.get("ppo", {}).get("action_scale", PPOConfig().action_scale))
    seeds = [int(s, 0) for s in str(args.seed).split(",")]
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_gates = generate_course(args.level, 0).n_gates
    per_seed = {}
    for seed in seeds:
        trace_dir = None
        if args.trace:
            trace_dir = out / "traces" / f"seed_{seed}"
            trace_dir.mkdir(parents=True, exist_ok=True)
        gates = rollout_episodes(params, args.level, seed, args.episodes, sim_cfg, action_scale,
                                 trace_dir=trace_dir)
        per_seed[seed] = success_rates(gates, n_gates)
    table = np.stack([per_seed[s] for s in seeds])
    report = {
        "checkpoint": str(args.checkpoint),
        "level": args.level,
        "episodes": args.episodes,
        "seeds": seeds,
        "per_seed": {str(s): [float(x) for x in per_seed[s]] for s in seeds},
        "mean": [float(x) for x in table.mean(0)],
        "min": [float(x) for x in table.min(0)],
        "max": [float(x) for x in table.max(0)],
        "final_gate_success": float(table[:, -1].mean()),
    }
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    header = ["gate"] + [f"seed_{s}" for s in seeds] + ["mean", "min", "max"]
    rows = [[k, *table[:, k], table[:, k].mean(), table[:, k].min(), table[:, k].max()] for k in range(n_gates)]
    write_csv(out / "eval_report.csv", header, rows)
    print(json.dumps({"episodes": args.episodes, "mean": report["mean"]}))
    return 0


# -- surface / course -------------------------------------------------------


def _color(x: float) -> str:
    """Blue (low) to yellow (high) ramp for x in [0, 1]."""
    x = min(max(x, 0.0), 1.0)
    r, g, b = int(40 + 215 * x), int(40 + 180 * x), int(160 - 130 * x)
    return f"#{r:02x}{g:02x}{b:02x}"


def surface_svg(grid: np.ndarray, engine: str) -> str:
    nx, ny = grid.shape
    size, pad = 400, 50
    cw, ch = size / ny, size / nx
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}">']
    for i in range(nx):
        for j in range(ny):
            # velocity grows upward, distance to the right
            x, y = pad + j * cw, pad + (nx - 1 - i) * ch
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw + 0.5:.2f}" height="{ch + 0.5:.2f}" '
                         f'fill="{_color(grid[i, j])}"/>')
    parts.append(f'<text x="{pad + size / 2}" y="{size + pad + 35}" text-anchor="middle">normalized distance</text>')
    parts.append(f'<text x="15" y="{pad + size / 2}" transform="rotate(-90 15 {pad + size / 2})" '
                 'text-anchor="middle">normalized speed</text>')
    parts.append(f'<text x="{pad + size / 2}" y="30" text-anchor="middle">{engine} reward surface</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_surface(args) -> int:
    if args.resolution < 2:
        raise ConfigError("--resolution must be >= 2")
    fs = _load_fuzzy(args.fuzzy_config)
    grid = surface_grid(fs, args.engine, args.resolution, args.resolution)
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"surface_{args.engine}_{args.resolution}.csv"
    write_csv(path, ("v_hat", "d_hat", "reward"), surface_rows(grid))
    print(path)
    if args.svg:
        svg = path.with_suffix(".svg")
        svg.write_text(surface_svg(grid, args.engine))
        print(svg)
    return 0


def course_svg(course: CourseSpec) -> str:
    (x0, x1), (y0, y1), _ = course.bounds
    scale, pad = 80.0, 20.0
    w, h = (x1 - x0) * scale + 2 * pad, (y1 - y0) * scale + 2 * pad

    def px(x, y):
        return pad + (x - x0) * scale, pad + (y1 - y) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}">',
             f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad:.1f}" height="{h - 2 * pad:.1f}" '
             'fill="none" stroke="#999"/>']
    sx, sy = px(0.0, 0.0)
    parts.append(f'<circle cx="{sx:.1f}" cy="{sy:.1f}" r="5" fill="#3a3"/>')
    for g in course.gates:
        c = np.asarray(g.center)
        lat = np.array([-g.normal[1], g.normal[0]])
        a, b = c[:2] + lat * g.diameter / 2, c[:2] - lat * g.diameter / 2
        (ax, ay), (bx, by) = px(*a), px(*b)
        parts.append(f'<line x1="{ax:.1f}" y1="{ay:.1f}" x2="{bx:.1f}" y2="{by:.1f}" stroke="#c33" stroke-width="4"/>')
        tx, ty = px(*c[:2])
        parts.append(f'<text x="{tx + 6:.1f}" y="{ty - 6:.1f}" font-size="11">{g.index}</text>')
    gx, gy = px(*course.goal[:2])
    parts.append(f'<circle cx="{gx:.1f}" cy="{gy:.1f}" r="7" fill="none" stroke="#33c" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_course(args) -> int:
    course = generate_course(args.level, args.seed)
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"course_{args.level}_{args.seed}.json"
    path.write_text(course.to_json() + "\n")
    print(path)
    if args.svg:
        svg = path.with_suffix(".svg")
        svg.write_text(course_svg(course))
        print(svg)
    return 0


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fars", description="Fuzzy reward shaping for gate racing.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy per seed from a key=value config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-gate success of a checkpoint's mean policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--level", required=True, choices=LEVELS)
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--seed", default="0", help="integer or comma-separated list")
    p.add_argument("--trace", action="store_true", help="write one trajectory CSV per episode")
    p.add_argument("--out", help="output directory (default: $FARS_OUTPUT_DIR or .)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("surface", help="export a fuzzy reward surface")
    p.add_argument("--engine", required=True, choices=ENGINES)
    p.add_argument("--resolution", type=int, default=51)
    p.add_argument("--fuzzy-config", help="fuzzy system JSON (default: built-in rule base)")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("course", help="generate one course")
    p.add_argument("--level", required=True, choices=LEVELS)
    p.add_argument("--seed", required=True, type=lambda s: int(s, 0))
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_course)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingAbort, SimError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
