"""Command-line front end: ``urbanwind <command> ...``.

Exit codes: 0 success, 1 usage error, 2 input parse error, 3 numerical failure.
Every command writes a JSON run manifest next to its output; ``urbanwind rerun
MANIFEST`` replays the recorded invocation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .citygen import (CityGenConfig, canonicalize_direction, generate_layout, layout_to_dict,
                      load_layout, rasterize_hard, save_layout)
from .domain import GridSpec, SimConfig
from .encoding import (ChannelMap, WndFormatError, encode, load_wnd, quantize8,
                       render_speed_colormap, save_wnd, write_png)
from .inverseopt import (InletSpec, OptimConfig, check_region, histogram_rows, optimize,
                         region_from_boxes, select_trainable)
from .metrics import metric_report
from .physloss import PhysLossConfig, total_physics_loss
from .rasterizer import LayoutParams
from .solver import SolverError, SolverParams, simulate

log = logging.getLogger("urbanwind")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ParseError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for k, v in r.items()})


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(path: Path, command: str, argv: list[str], config: dict, inputs, outputs,
                    started: float, seeds=None) -> None:
    _write_json(path, {
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.time() - started, 3),
    })


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _load_wnd(path):
    try:
        return load_wnd(path)
    except FileNotFoundError as exc:
        raise ParseError(str(exc)) from exc
    except WndFormatError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _load_layout(path):
    try:
        return load_layout(path)
    except FileNotFoundError as exc:
        raise ParseError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _footprint(seq):
    from .domain import BuildingFootprint

    return BuildingFootprint(seq.occupancy, validate=False)


# ---------------------------------------------------------------------------
# citygen


def make_city(seed: int, diameter: float | None, grid: int, frames: int,
              direction: float | None = None):
    cfg = CityGenConfig(seed=seed, city_diameter=diameter, grid_size=grid, T=frames,
                        wind_direction=direction)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        blocks, sim = generate_layout(cfg)
    blocks = canonicalize_direction(blocks, blocks.meta["wind_direction"])
    return blocks, sim, cfg


def cmd_citygen(args, argv) -> int:
    t0 = time.time()
    blocks, sim, cfg = make_city(args.seed, args.diameter, args.grid, 112, args.direction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_layout(out, blocks, sim)
    _write_manifest(_manifest_path(out), "citygen", argv, _jsonable(asdict(cfg)), [], [out], t0,
                    seeds=[args.seed])
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _solver_params(mode: str) -> SolverParams:
    return SolverParams(occupancy_mode=mode)


def run_simulation(layout_dict: dict, grid: int, frames: int, u_in: float | None, mode: str):
    from .citygen import layout_from_dict

    blocks = layout_from_dict(layout_dict)
    speed = u_in if u_in is not None else layout_dict.get("u_in")
    if speed is None:
        raise ParseError("layout has no u_in; pass --u-in")
    cfg = SimConfig(u_in=float(speed), grid=GridSpec(grid, grid, blocks.L), T=frames)
    fp = rasterize_hard(blocks, cfg.grid)
    occ = fp if mode == "hard" else fp.occupancy.astype(float)
    return simulate(occ, cfg, _solver_params(mode))


def cmd_simulate(args, argv) -> int:
    t0 = time.time()
    _, d = _load_layout(args.layout)
    seq = run_simulation(d, args.grid, args.frames, args.u_in, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wnd(out, seq)
    _write_manifest(_manifest_path(out), "simulate", argv,
                    {"grid": args.grid, "frames": args.frames, "u_in": seq.config.u_in,
                     "mode": args.mode, "solver": asdict(_solver_params(args.mode))},
                    [args.layout], [out], t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# dataset

SPLITS = ("train", "val", "test")


def sample_seed(master: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([master, split, index]).generate_state(1, np.uint64)[0])


def _dataset_sample(job):
    split_dir, name, seed, grid, frames = job
    try:
        blocks, sim, _ = make_city(seed, None, grid, frames)
        fp = rasterize_hard(blocks, sim.grid)
        seq = simulate(fp, sim, _solver_params("hard"))
        save_layout(Path(split_dir) / f"{name}.json", blocks, sim)
        save_wnd(Path(split_dir) / f"{name}.wnd", seq)
        return name, None
    except (SolverError, ValueError, OSError) as exc:
        return name, f"{type(exc).__name__}: {exc}"


def cmd_dataset(args, argv) -> int:
    t0 = time.time()
    root = Path(args.out_dir)
    jobs, seeds = [], {}
    for s, (split, n) in enumerate(zip(SPLITS, (args.n_train, args.n_val, args.n_test))):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            seed = sample_seed(args.seed, s, i)
            name = f"{split}_{i:05d}"
            seeds[name] = seed
            jobs.append((str(d), name, seed, args.grid, args.frames))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_dataset_sample, jobs))
    else:
        results = [_dataset_sample(j) for j in jobs]
    failed = {name: err for name, err in results if err}
    for name, err in failed.items():
        log.error("sample %s failed: %s", name, err)
    outputs = [p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"]
    _write_manifest(root / "manifest.json", "dataset", argv,
                    {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test,
                     "grid": args.grid, "frames": args.frames, "failed": failed},
                    [], outputs, t0, seeds={"master": args.seed, **seeds})
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics / physloss


def cmd_metrics(args, argv) -> int:
    t0 = time.time()
    pred, gt = _load_wnd(args.pred), _load_wnd(args.gt)
    if pred.stack()[0].shape != gt.stack()[0].shape:
        raise ParseError("pred and gt have different shapes")
    rep = metric_report(pred, gt, _footprint(gt))
    out = Path(args.out)
    _write_csv(out, [rep.as_dict()])
    _write_manifest(_manifest_path(out), "metrics", argv, {}, [args.pred, args.gt], [out], t0)
    return EXIT_OK


def cmd_physloss(args, argv) -> int:
    t0 = time.time()
    pred, gt = _load_wnd(args.pred), _load_wnd(args.gt)
    if pred.stack()[0].shape != gt.stack()[0].shape:
        raise ParseError("pred and gt have different shapes")
    cfg = PhysLossConfig(lambda_div=args.lambda_div, lambda_wall=args.lambda_wall)
    _, parts = total_physics_loss(pred, gt, _footprint(gt), cfg)
    out = Path(args.out)
    _write_csv(out, [{"total": parts["total"], "data": parts["data"], "div": parts["div"],
                      "wall": parts["wall"]}])
    _write_manifest(_manifest_path(out), "physloss", argv, asdict(cfg), [args.pred, args.gt],
                    [out], t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def cmd_render(args, argv) -> int:
    t0 = time.time()
    seq = _load_wnd(args.input)
    if not 0 <= args.frame <= seq.T:
        raise UsageError(f"--frame must lie in [0, {seq.T}] (0 is the conditioning frame)")
    if args.encoded:
        cmap = ChannelMap.from_string(args.channels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rgb = encode(seq, cmap)[args.frame]
        img = quantize8(rgb, cmap)
    else:
        field = seq.conditioning if args.frame == 0 else seq.frames[args.frame - 1]
        img = render_speed_colormap(field, seq.occupancy, seq.config.u_max)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, img)
    _write_manifest(_manifest_path(out), "render", argv,
                    {"frame": args.frame, "encoded": args.encoded, "channels": args.channels},
                    [args.input], [out], t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# optimize


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib

    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ParseError(str(exc)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_region(path, grid: GridSpec) -> np.ndarray:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ParseError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if "mask" in d:
        m = np.asarray(d["mask"], dtype=np.uint8)
        if m.shape != grid.shape:
            raise ParseError(f"{path}: mask shape {m.shape} does not match grid {grid.shape}")
        return m
    if "boxes_m" in d:
        return region_from_boxes(grid, d["boxes_m"])
    raise ParseError(f"{path}: expected 'mask' or 'boxes_m'")


OPTIM_KEYS = {f.name for f in fields(OptimConfig)}


def build_optimization(layout: dict, region_path, conf: dict, overrides: dict):
    from .citygen import layout_from_dict

    conf = {**conf, **{k: v for k, v in overrides.items() if v is not None}}
    blocks = layout_from_dict(layout)
    n = int(conf.get("grid", 64))
    grid = GridSpec(n, n, blocks.L)
    omega = load_region(region_path, grid)
    inlet_rows = conf.get("inlets") or [{"direction": "left", "u_in": 15.0}]
    inlets = [InletSpec(**row) for row in inlet_rows]
    unknown = set(conf) - OPTIM_KEYS - {"grid", "inlets", "mode", "S", "n_trainable",
                                        "trainable", "brinkman_eps", "cfl_limit",
                                        "checkpoint_every"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    optim = OptimConfig(**{k: conf[k] for k in OPTIM_KEYS if k in conf})
    if "trainable" in conf:
        flags = np.zeros(len(blocks), dtype=bool)
        flags[list(conf["trainable"])] = True
    else:
        flags = select_trainable(blocks.centers, omega, grid, int(conf.get("n_trainable", 15)))
    params = LayoutParams.from_blocks(blocks, flags, conf.get("mode", "rigid"), int(conf.get("S", 2)))
    solver = SolverParams(occupancy_mode="soft", brinkman_eps=float(conf.get("brinkman_eps", 1e-3)),
                          cfl_limit=float(conf.get("cfl_limit", 0.9)))
    check_region(omega, rasterize_hard(blocks, grid))
    return params, inlets, omega, grid, optim, solver, conf


def _params_layout(params: LayoutParams) -> dict:
    return layout_to_dict(params.to_blocks()) | {
        "trainable": [bool(t) for t in params.trainable],
        "parent": [int(p) for p in params.parent], "mode": params.mode}


def cmd_optimize(args, argv) -> int:
    t0 = time.time()
    _, layout = _load_layout(args.layout)
    conf = load_config(args.config)
    params, inlets, omega, grid, optim, solver, conf = build_optimization(
        layout, args.region, conf, {"steps": args.steps, "jobs": args.jobs})
    out = Path(args.out)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    every = int(conf.get("checkpoint_every", 10))

    def checkpoint(rec):
        if rec.step % every == 0 or rec.step == optim.steps:
            _write_json(out / "layouts" / f"step_{rec.step:04d}.json",
                        _params_layout(params.with_theta(rec.theta)))

    traj = optimize(params, inlets, omega, grid, optim, solver, callback=checkpoint)
    _write_csv(out / "trajectory.csv", [r.row() for r in traj.records])
    obj = traj.objective
    before = obj.simulate_inlets(traj.records[0].theta, hard=True)
    after = obj.simulate_inlets(traj.records[-1].theta, hard=True)
    for inlet, sb, sa in zip(inlets, before, after):
        for tag, seq in (("before", sb), ("after", sa)):
            img = render_speed_colormap(seq.frames[-1], seq.occupancy, seq.config.u_max)
            write_png(out / f"{tag}_{inlet.direction}.png", np.rot90(img, -inlet.turns))
    _write_csv(out / "histogram.csv", histogram_rows(before, after, omega, inlets))
    _write_json(out / "final_layout.json", _params_layout(traj.params_at(-1)))
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _write_manifest(out / "manifest.json", "optimize", argv,
                    _jsonable({"optim": asdict(optim), "solver": asdict(solver),
                               "inlets": [asdict(i) for i in inlets], "grid": grid.H,
                               "mode": params.mode, "error": traj.error}),
                    [args.layout, args.region] + ([args.config] if args.config else []),
                    outputs, t0)
    if traj.error:
        log.error(traj.error)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args, argv) -> int:
    try:
        m = json.loads(Path(args.manifest).read_text())
        recorded = list(m["argv"])
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"{args.manifest}: cannot read manifest ({exc})") from exc
    return main(recorded)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="urbanwind", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("citygen", help="generate a layout JSON")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--diameter", type=float, default=None)
    c.add_argument("--direction", type=float, default=None, help="wind direction in degrees")
    c.add_argument("--grid", type=int, default=256)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_citygen)

    c = sub.add_parser("simulate", help="simulate a layout into a .wnd file")
    c.add_argument("--layout", required=True)
    c.add_argument("--grid", type=int, default=256)
    c.add_argument("--frames", type=int, default=112)
    c.add_argument("--u-in", type=float, default=None)
    c.add_argument("--mode", choices=("hard", "soft"), default="hard")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("dataset", help="generate train/val/test simulations")
    c.add_argument("--n-train", type=int, default=10)
    c.add_argument("--n-val", type=int, default=1)
    c.add_argument("--n-test", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--grid", type=int, default=64)
    c.add_argument("--frames", type=int, default=28)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_dataset)

    for name, fn, helptext in (("metrics", cmd_metrics, "evaluation metrics as CSV"),
                               ("physloss", cmd_physloss, "physics-informed losses as CSV")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--pred", required=True)
        c.add_argument("--gt", required=True)
        c.add_argument("--out", required=True)
        if name == "physloss":
            c.add_argument("--lambda-div", type=float, default=10.0)
            c.add_argument("--lambda-wall", type=float, default=10.0)
        c.set_defaults(func=fn)

    c = sub.add_parser("render", help="render one frame to PNG")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--frame", type=int, required=True)
    c.add_argument("--encoded", action="store_true", help="write the RGB encoding instead")
    c.add_argument("--channels", default="uvb")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_render)

    c = sub.add_parser("optimize", help="optimize building positions")
    c.add_argument("--layout", required=True)
    c.add_argument("--region", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--jobs", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_optimize)

    c = sub.add_parser("rerun", help="replay a run manifest")
    c.add_argument("manifest")
    c.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"urbanwind: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"urbanwind: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SolverError as exc:
        print(f"urbanwind: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TypeError, ValueError) as exc:
        print(f"urbanwind: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
