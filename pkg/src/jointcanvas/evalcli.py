"""Benchmark, perturbation and ablation sweeps, reports, and the command line."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agent, render
from . import simworld as sw
from .errors import ConfigError, IoFailure, JointCanvasError, UnknownCategory, UnknownFactor

SEED_ENV = "JOINTCANVAS_SEED"
COLUMNS = ("task", "condition", "episodes", "success_pct", "mean_steps", "mean_decode_residual", "delta_pct")
FACTORS = ("action_mode", "chunk_K", "exec_horizon", "stripes", "tiling", "ensemble_m", "fixed_interval")
DEFAULT_TILING_NOISE = "jitter=2,dup=0.5"


@dataclass(frozen=True)
class RunConfig:
    tasks: tuple = tuple(sw.TASKS)
    drawer: str = "oracle"
    episodes: int = 50
    seed: int = 0
    mode: str = "absolute"
    K: int = 20
    H: int = 20
    sigma: float = 0.0
    ensemble_m: float | None = None
    fixed_interval: bool = False
    stripes: bool = True
    budget: int = agent.DEFAULT_BUDGET
    category: str | None = None
    magnitude: float = 1.0
    noise: str = DEFAULT_TILING_NOISE  # used by the tiling ablation
    out: str | None = None
    fmt: str = "csv"

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError("magnitude must lie in [0, 1]")
        for t in self.tasks:
            if t not in sw.TASKS:
                raise ConfigError(f"unknown task {t!r}")
        try:
            self.controller()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        agent.parse_drawer(self.drawer, self.K, self.stripes)

    def controller(self) -> agent.ControllerConfig:
        m = self.ensemble_m
        return agent.ControllerConfig(self.mode, self.K, self.H, self.sigma, m or 0.0, m is not None, self.fixed_interval)


@dataclass(frozen=True)
class Row:
    task: str
    condition: str
    episodes: int
    success_pct: float
    mean_steps: float
    mean_decode_residual: float
    delta_pct: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.success_pct <= 100.0:
            raise ValueError("success_pct must lie in [0, 100]")


@dataclass(frozen=True)
class ResultTable:
    rows: tuple

    def row(self, task: str, condition: str) -> Row:
        return next(r for r in self.rows if r.task == task and r.condition == condition)


def episode_seed(seed: int, task_index: int, episode: int) -> int:
    """Distinct per-episode seed: SeedSequence mixing of (seed, task index, episode index)."""
    return int(np.random.SeedSequence([int(seed), int(task_index), int(episode)]).generate_state(1, np.uint32)[0])


# --- formatting ----------------------------------------------------------


def fmt1(x: float) -> str:
    """One decimal, round half up (89.95 -> 90.0, 89.999 -> 90.0)."""
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def fmt_res(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _cells(r: Row) -> list[str]:
    return [r.task, r.condition, str(r.episodes), fmt1(r.success_pct), fmt1(r.mean_steps), fmt_res(r.mean_decode_residual), fmt1(r.delta_pct)]


def table_to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in table.rows:
        w.writerow(_cells(r))
    return buf.getvalue()


def _parse_num(s: str):
    if s == "":
        return None
    return float(s)


def table_from_csv(text: str) -> ResultTable:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if tuple(header) != COLUMNS:
        raise ValueError(f"unexpected CSV columns {header}")
    rows = []
    for c in rd:
        rows.append(Row(c[0], c[1], int(c[2]), float(c[3]), float(c[4]), float(c[5]), _parse_num(c[6])))
    return ResultTable(tuple(rows))


def table_to_json(table: ResultTable) -> str:
    """Same fields and rounding as the CSV."""
    rows = []
    for r in table.rows:
        cells = _cells(r)
        rows.append(
            {
                "task": r.task,
                "condition": r.condition,
                "episodes": r.episodes,
                "success_pct": float(cells[3]),
                "mean_steps": float(cells[4]),
                "mean_decode_residual": None if math.isnan(r.mean_decode_residual) else float(cells[5]),
                "delta_pct": None if r.delta_pct is None else float(cells[6]),
            }
        )
    return json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=2) + "\n"


def table_from_json(text: str) -> ResultTable:
    d = json.loads(text)
    rows = []
    for r in d["rows"]:
        res = r["mean_decode_residual"]
        rows.append(Row(r["task"], r["condition"], r["episodes"], r["success_pct"], r["mean_steps"], float("nan") if res is None else res, r["delta_pct"]))
    return ResultTable(tuple(rows))


def emit_report(table: ResultTable, path: str | Path, fmt: str = "csv") -> list[Path]:
    """Write ``path`` as CSV, JSON, or both (``fmt="both"`` swaps the suffix)."""
    if not table.rows:
        raise ValueError("cannot emit an empty table")
    path = Path(path)
    formats = ("csv", "json") if fmt == "both" else (fmt,)
    written = []
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"unknown report format {f!r}")
        p = path.with_suffix("." + f) if fmt == "both" else path
        text = table_to_csv(table) if f == "csv" else table_to_json(table)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write report {p}: {exc}") from None
        written.append(p)
    return written


# --- sweeps --------------------------------------------------------------


def perturbed_style(task: str, seed: int, pert: dict) -> render.SceneStyle:
    """Style for one perturbed episode; recomputable from (task, seed, pert)."""
    world = sw.reset(task, seed)
    names = list(world.objects)
    avoid = [o.pose[:3, 3] for o in world.objects.values()]
    if "target" in world.goal:
        avoid.append(np.array([*world.goal["target"], 0.0]))
    kw = {}
    if pert.get("gain") is not None:
        kw["gain"] = pert["gain"]
    if pert.get("tint") is not None:
        kw["tint"] = pert["tint"]
    return render.apply_perturbation(
        render.SceneStyle(), pert["category"], int(pert.get("seed", seed)), magnitude=float(pert.get("magnitude", 1.0)),
        object_names=names, avoid_xy=avoid, **kw,
    )


def _episode(task: str, seed: int, drawer, controller, budget: int, pert: dict | None = None):
    """One episode on a sanity-checked (expert-solvable) reset, reseeding if needed."""
    world, _ = sw.solvable_reset(task, seed)
    if pert:
        # Recomputed from the final (possibly reseeded) episode seed so an
        # external responder can rebuild the same style from the state file.
        pert = dict(pert, seed=world.seed)
        world.style = perturbed_style(task, world.seed, pert)
    if isinstance(drawer, agent.ExternalDrawer):
        drawer.perturbation = pert
    return agent.run_episode(task, drawer, controller, budget, world.seed, world=world)


def _row(task: str, condition: str, results: Sequence[agent.EpisodeResult], delta=None) -> Row:
    succ = 100.0 * float(np.mean([r.success == 100 for r in results]))
    res = [r.mean_decode_residual for r in results if not math.isnan(r.mean_decode_residual)]
    return Row(task, condition, len(results), succ, float(np.mean([r.steps for r in results])), float(np.mean(res)) if res else float("nan"), delta)


def _sweep(cfg: RunConfig, condition: str, drawer_spec: str | None = None, controller=None, pert_fn=None, stripes=None, progress=None):
    controller = controller or cfg.controller()
    stripes = cfg.stripes if stripes is None else stripes
    rows, per_task = [], {}
    for ti, task in enumerate(cfg.tasks):
        drawer = agent.parse_drawer(drawer_spec or cfg.drawer, controller.K, stripes)
        results = []
        for ep in range(cfg.episodes):
            s = episode_seed(cfg.seed, ti, ep)
            pert = pert_fn(s) if pert_fn else None
            results.append(_episode(task, s, drawer, controller, cfg.budget, pert))
            if progress:
                progress(task, condition, ep, results[-1])
        per_task[task] = results
        rows.append(_row(task, condition, results))
    return rows, per_task


def run_benchmark(cfg: RunConfig, progress=None) -> ResultTable:
    rows, _ = _sweep(cfg, cfg.drawer, progress=progress)
    return ResultTable(tuple(rows))


def run_perturbations(
    cfg: RunConfig, progress=None, gain: float | None = None, tint=None, baseline: ResultTable | None = None
) -> ResultTable:
    """Baseline and perturbed rows per task; ``delta_pct`` = perturbed - baseline.

    A ``baseline`` table from an earlier call with the same config is reused
    instead of being re-run.
    """
    if cfg.category not in render.PERTURBATIONS:
        raise UnknownCategory(f"unknown perturbation category {cfg.category!r}; known: {render.PERTURBATIONS}")
    if baseline is None:
        base, _ = _sweep(cfg, "baseline", progress=progress)
    else:
        base = [baseline.row(t, "baseline") for t in cfg.tasks]

    def pert(s):
        return {"category": cfg.category, "seed": s, "magnitude": cfg.magnitude, "gain": gain, "tint": None if tint is None else list(tint)}

    cond = f"{cfg.category}@{cfg.magnitude:g}"
    pr, _ = _sweep(cfg, cond, pert_fn=pert, progress=progress)
    rows = list(base)
    for b, p in zip(base, pr):
        rows.append(replace(p, delta_pct=p.success_pct - b.success_pct))
    return ResultTable(tuple(rows))


def ablation_levels(factor: str, cfg: RunConfig) -> list[tuple[str, dict]]:
    """(condition label, overrides) per level."""
    if factor == "action_mode":
        return [(m, {"mode": m}) for m in ("absolute", "delta", "end_effector")]
    if factor == "chunk_K":
        return [(f"K={k}", {"K": k, "H": k}) for k in (5, 10, 20, 40)]
    if factor == "exec_horizon":
        return [(f"H={h}", {"H": h}) for h in (1, 5, 10, 20) if h <= cfg.K]
    if factor == "stripes":
        return [("stripes=on", {"stripes": True}), ("stripes=off", {"stripes": False})]
    if factor == "tiling":
        spec = agent.NoiseSpec.parse(cfg.noise)
        tiled = replace(spec, per_view_independent=False).format()
        indep = replace(spec, per_view_independent=True).format()
        return [("tiled", {"drawer": f"noisy:{tiled}"}), ("per_view_independent", {"drawer": f"noisy:{indep}"})]
    if factor == "ensemble_m":
        H = cfg.H if cfg.H < cfg.K else max(1, cfg.K // 4)
        return [("ensemble=off", {"H": H, "ensemble_m": None})] + [(f"m={m:g}", {"H": H, "ensemble_m": m}) for m in (0.0, 0.01, 0.1)]
    if factor == "fixed_interval":
        return [("fixed_interval=off", {"fixed_interval": False}), ("fixed_interval=on", {"fixed_interval": True})]
    raise UnknownFactor(f"unknown ablation factor {factor!r}; known: {FACTORS}")


def run_ablation(factor: str, cfg: RunConfig, progress=None) -> ResultTable:
    rows = []
    for label, over in ablation_levels(factor, cfg):
        sub = replace(cfg, **over)
        r, _ = _sweep(sub, label, progress=progress)
        rows += r
    order = {t: i for i, t in enumerate(cfg.tasks)}
    rows.sort(key=lambda r: order[r.task])
    return ResultTable(tuple(rows))


# --- command line --------------------------------------------------------


RUN_KEYS = {
    "tasks": lambda v: tuple(t.strip() for t in v.split(",") if t.strip()),
    "drawer": str,
    "episodes": int,
    "seed": int,
    "mode": str,
    "K": int,
    "H": int,
    "sigma": float,
    "ensemble_m": float,
    "fixed_interval": lambda v: v.lower() in ("1", "true", "yes", "on"),
    "stripes": lambda v: v.lower() in ("1", "true", "yes", "on"),
    "budget": int,
    "category": str,
    "magnitude": float,
    "noise": str,
}


def parse_run_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines (``#`` comments) into RunConfig overrides."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in RUN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {k!r}")
        try:
            out[k] = RUN_KEYS[k](v)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {k}: {v!r}") from None
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-config", help="file of key = value run settings; flags override it")
    p.add_argument("--tasks", help="comma-separated task names (default: all five)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--drawer", help="oracle | noisy:<spec> | external:<dir>")
    p.add_argument("--action-mode", choices=("absolute", "delta", "ee"))
    p.add_argument("--chunk", type=int, metavar="K")
    p.add_argument("--horizon", type=int, metavar="H")
    p.add_argument("--ensemble-m", type=float, metavar="M", help="enable temporal ensembling with decay M")
    p.add_argument("--sigma", type=float, help="actuation noise per joint per step, degrees")
    p.add_argument("--budget", type=int)
    p.add_argument("--fixed-interval", action="store_true", default=None)
    p.add_argument("--no-stripes", action="store_true", default=None)
    p.add_argument("--out", help="report path (default: stdout CSV)")
    p.add_argument("--format", choices=("csv", "json", "both"), default="csv")


def _run_config(args, **extra) -> RunConfig:
    kw: dict = {}
    if args.run_config:
        try:
            text = Path(args.run_config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read run config {args.run_config}: {exc}") from None
        kw.update(parse_run_config(text, args.run_config))
    flag_map = {
        "tasks": RUN_KEYS["tasks"](args.tasks) if args.tasks else None,
        "episodes": args.episodes,
        "seed": args.seed,
        "drawer": args.drawer,
        "mode": args.action_mode,
        "K": args.chunk,
        "H": args.horizon,
        "ensemble_m": args.ensemble_m,
        "sigma": math.radians(args.sigma) if args.sigma is not None else None,
        "budget": args.budget,
        "fixed_interval": args.fixed_interval,
        "stripes": False if args.no_stripes else None,
    }
    kw.update({k: v for k, v in flag_map.items() if v is not None})
    if "sigma" in kw and args.sigma is None and args.run_config:
        kw["sigma"] = math.radians(kw["sigma"])
    if "K" in kw and "H" not in kw:
        kw["H"] = kw["K"]
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            kw["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    kw.update(extra)
    if args.out:
        kw["out"], kw["fmt"] = args.out, args.format
    return RunConfig(**kw)


def _report(table: ResultTable, cfg: RunConfig) -> None:
    if cfg.out:
        for p in emit_report(table, cfg.out, cfg.fmt):
            print(f"wrote {p}", file=sys.stderr)
    else:
        sys.stdout.write(table_to_csv(table))


def _progress(verbose: bool):
    if not verbose:
        return None

    def show(task, cond, ep, res):
        print(f"{task} [{cond}] episode {ep}: success={res.success} steps={res.steps} cause={res.cause}", file=sys.stderr)

    return show


def _cmd_gen_demos(args) -> int:
    from .config import load_config

    setup = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = sw.get_task(args.task)
    seed = int(os.environ.get(SEED_ENV, args.seed))
    poses = sw.sample_pose_grid(task.bounds, task.yaw_range, args.n) if args.grid else [None] * args.n
    for ep, pose in enumerate(poses):
        world, demo = sw.solvable_reset(task, episode_seed(seed, 0, ep), setup.arm, pose=pose)
        if not args.no_views:
            vdir = out / f"{ep:04d}"
            vdir.mkdir(exist_ok=True)
            for k, st in enumerate(demo.steps):
                views, _ = sw.render_views(setup.arm, setup.rig, st.config, sw.demo_objects(demo, k), render.SceneStyle())
                refs = {}
                for v in views:
                    p = vdir / f"{st.t:06d}_{v.view_name}.png"
                    render.write_png(p, v.pixels)
                    refs[v.view_name] = str(p.relative_to(out))
                demo.steps[k] = replace(st, view_refs=refs)
        sw.write_demo(demo, out / f"{ep:04d}.jsonl")
        print(f"demo {ep}: {len(demo)} steps", file=sys.stderr)
    return 0


def _cmd_make_dataset(args) -> int:
    from . import dataset
    from .config import load_config

    setup = load_config(args.config)
    demos = sorted(Path(args.demos).glob("*.jsonl"))
    seed = int(os.environ.get(SEED_ENV, args.seed))
    pairs = []
    for ep, path in enumerate(demos):
        demo = sw.read_demo(path)
        pairs += dataset.extract_pairs(demo, args.K, args.stride, setup.arm, setup.rig, episode=ep)
    if args.controller_set:
        pairs = dataset.make_controller_set(pairs, seed)
    man = dataset.write_dataset(pairs, args.out, rig=setup.rig)
    print(f"wrote {len(man.records)} pairs to {args.out}", file=sys.stderr)
    return 0


def _cmd_validate(args) -> int:
    from . import dataset

    v = dataset.validate_manifest(args.dir)
    for x in v:
        print(f"{x.kind}\t{x.path}\t{x.detail}")
    print(f"{len(v)} violation(s)", file=sys.stderr)
    return 0 if not v else 3


def _cmd_decode_debug(args) -> int:
    from . import decode
    from .config import load_config
    from .kinematics import JointConfig

    setup = load_config(args.config)
    if args.q:
        try:
            q = JointConfig(np.array([float(x) for x in args.q.split(",")]), args.gripper)
        except ValueError as exc:
            raise ConfigError(f"--q: {exc}") from None
    else:
        q = setup.arm.home_config()
    results = {}
    for path in args.images:
        px = render.read_png(path)
        try:
            dec = decode.decode_tiled(render.TiledImage(px), setup.arm, setup.rig, q)
            results[path] = dec.to_json()
        except JointCanvasError as exc:
            results[path] = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointcanvas", description="Joint-actions drawn as images: demos, datasets, decoding and closed-loop evaluation.")
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-demos", help="scripted expert demonstrations")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", action="store_true", help="grid-sample object poses instead of random placement")
    p.add_argument("--no-views", action="store_true", help="skip writing per-step view images")
    p.add_argument("--config", help="arm/rig config file")

    p = sub.add_parser("make-dataset", help="fine-tuning pairs from demos")
    p.add_argument("--demos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int, default=20)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--controller-set", action="store_true", help="random-background condition images")
    p.add_argument("--config")

    p = sub.add_parser("validate", help="check a dataset manifest")
    p.add_argument("dir")

    p = sub.add_parser("eval", help="closed-loop benchmark")
    _add_run_flags(p)

    p = sub.add_parser("perturb", help="perturbation sweep vs baseline")
    _add_run_flags(p)
    p.add_argument("--category", required=True)
    p.add_argument("--magnitude", type=float, default=1.0)

    p = sub.add_parser("ablate", help="one-factor ablation sweep")
    _add_run_flags(p)
    p.add_argument("--factor", required=True)
    p.add_argument("--noise", help="noise spec for the tiling ablation")

    p = sub.add_parser("decode-debug", help="dump detections and decoded q for target PNGs")
    p.add_argument("images", nargs="+")
    p.add_argument("--q", help="current joint angles, comma separated (default: home)")
    p.add_argument("--gripper", default="open", choices=("open", "closed"))
    p.add_argument("--config")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.cmd == "gen-demos":
            return _cmd_gen_demos(args)
        if args.cmd == "make-dataset":
            return _cmd_make_dataset(args)
        if args.cmd == "validate":
            return _cmd_validate(args)
        if args.cmd == "decode-debug":
            return _cmd_decode_debug(args)
        prog = _progress(args.verbose)
        if args.cmd == "eval":
            cfg = _run_config(args)
            _report(run_benchmark(cfg, prog), cfg)
        elif args.cmd == "perturb":
            cfg = _run_config(args, category=args.category, magnitude=args.magnitude)
            _report(run_perturbations(cfg, prog), cfg)
        else:
            extra = {"noise": args.noise} if args.noise else {}
            cfg = _run_config(args, **extra)
            _report(run_ablation(args.factor, cfg, prog), cfg)
        return 0
    except (ConfigError, UnknownCategory, UnknownFactor) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (JointCanvasError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
