"""Command-line driver: ``mcga <command> [options]``.

Every option resolves as flag > ``--config`` JSON file > built-in default, and
the resolved set is written to ``<out>/config.json`` so a run can be repeated
with ``--config <out>/config.json``. Logs are ``key=value`` lines on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .codebook import mix_codebook_sets
from .data import (
    PairedSample,
    gamma_perturb,
    load_cube_dir,
    make_pairs,
    metrics,
    patch_shuffle,
    write_metrics_csv,
)
from .errors import ArgumentError, ConfigurationError, ParseError
from .ganet import GanetConfig, build_pipeline, predict, train_stage2
from .msvqvae import StageOneConfig, check_schedule, train_stage1
from .tta import TtaConfig, adapt

# name -> (type, default, help)
OPTIONS = {
    "config": (str, None, "JSON file of option values (flags override it)"),
    "out": (str, None, "output directory"),
    "seed": (int, 0, "random seed"),
    "n_train": (int, 8, "number of training pairs"),
    "n_val": (int, 2, "number of validation pairs"),
    "channels": (int, 16, "spectral bands"),
    "height": (int, 32, "image height"),
    "width": (int, 32, "image width"),
    "n_materials": (int, 3, "materials per synthetic scene"),
    "data": (str, None, "data directory (rgb/ and hsi/ sub-directories, or plain cubes)"),
    "scales": (int, 2, "number of scales S"),
    "beta": (float, 0.25, "VQ loss weight"),
    "n_entries": (int, 512, "codebook entries per scale"),
    "stage1_lr": (float, 4e-4, "stage-1 peak learning rate"),
    "stage1_epochs": (int, 300, "stage-1 epochs"),
    "source_tag": (str, "default", "codebook source label"),
    "batch_size": (int, 8, "batch size"),
    "inputs": (str, None, "comma-separated stage-1 checkpoints or codebook files to mix"),
    "stage1": (str, None, "stage-1 checkpoint"),
    "codebooks": (str, None, "codebook file overriding the stage-1 codebooks"),
    "top_k": (int, 256, "GQA top-K size"),
    "ga_ratio": (float, 0.5, "fraction of feedforward channels sent to GA_l"),
    "stage2_lr": (float, 1e-2, "stage-2 peak learning rate"),
    "stage2_epochs": (int, 500, "stage-2 epochs"),
    "model": (str, None, "stage-2 checkpoint"),
    "input": (str, None, "directory of RGB cubes"),
    "tta_steps": (int, 10, "adaptation steps per input"),
    "tta_lr": (float, 1e-4, "adaptation learning rate"),
    "tta_temp": (float, 1.0, "softmax temperature of the codebook-query probabilities"),
    "persist": (bool, False, "carry adapted GA parameters across inputs"),
    "pred": (str, None, "directory of predicted cubes"),
    "truth": (str, None, "directory of ground-truth cubes"),
    "kind": (str, "gamma", "perturbation: gamma or shuffle"),
    "gamma": (float, 0.9, "gamma exponent"),
    "patch": (int, 16, "shuffle patch size"),
    "axis": (str, None, "ablation axis: scales, topk, ga_ratio or codebook_mode"),
    "values": (str, None, "comma-separated axis values"),
    "jobs": (int, 1, "parallel ablation points"),
}

TRAIN_OPTS = ["seed", "scales", "beta", "n_entries", "stage1_lr", "stage1_epochs", "source_tag", "batch_size",
              "top_k", "ga_ratio", "stage2_lr", "stage2_epochs"]

COMMANDS = {
    "gen-data": ["seed", "n_train", "n_val", "channels", "height", "width", "n_materials"],
    "train-stage1": ["data", "seed", "scales", "beta", "n_entries", "stage1_lr", "stage1_epochs",
                     "source_tag", "batch_size"],
    "mix-codebooks": ["inputs"],
    "train-stage2": ["data", "stage1", "codebooks", "seed", "top_k", "ga_ratio", "stage2_lr",
                     "stage2_epochs", "batch_size"],
    "infer": ["model", "input"],
    "tta-infer": ["model", "input", "tta_steps", "tta_lr", "tta_temp", "persist"],
    "eval": ["pred", "truth"],
    "perturb": ["data", "kind", "gamma", "patch", "seed"],
    "ablate": ["axis", "values", "jobs", "n_train", "n_val", "channels", "height", "width", "n_materials"]
              + TRAIN_OPTS,
}

REQUIRED = {
    "gen-data": ["out"],
    "train-stage1": ["data", "out"],
    "mix-codebooks": ["inputs", "out"],
    "train-stage2": ["data", "stage1", "out"],
    "infer": ["model", "input", "out"],
    "tta-infer": ["model", "input", "out"],
    "eval": ["pred", "truth"],
    "perturb": ["data", "out"],
    "ablate": ["axis", "values", "out"],
}

AXES = ("scales", "topk", "ga_ratio", "codebook_mode")


class CliUsageError(Exception):
    pass


def log(**fields) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), flush=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v).replace(" ", "_")


# -- argument handling ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcga", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for opt in ["config", "out"] + opts:
            typ, default, help_text = OPTIONS[opt]
            flag = "--" + opt.replace("_", "-")
            shown = f"{help_text} (default: {default})" if default is not None else help_text
            if typ is bool:
                p.add_argument(flag, dest=opt, action="store_true", default=None, help=shown)
            else:
                p.add_argument(flag, dest=opt, type=typ, default=None, help=shown)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults, for the options of ``args.command``."""
    names = ["out"] + COMMANDS[args.command]
    cfg = {n: OPTIONS[n][1] for n in names}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliUsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(names) - {"command"}
        if unknown:
            raise CliUsageError(f"config has options unknown to {args.command}: {sorted(unknown)}")
        for n, v in loaded.items():
            if n != "command":
                cfg[n] = v
    for n in names:
        v = getattr(args, n, None)
        if v is not None:
            cfg[n] = v
    missing = [n for n in REQUIRED[args.command] if cfg.get(n) is None]
    if missing:
        raise CliUsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def save_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_bytes(formats.canonical_json({"command": command, **cfg}) + b"\n")


def _split(values: str) -> list[str]:
    return [v.strip() for v in str(values).split(",") if v.strip()]


# -- data directories ------------------------------------------------------------------------


def write_pairs(root: Path, pairs: list[PairedSample]) -> None:
    for kind in ("rgb", "hsi"):
        (root / kind).mkdir(parents=True, exist_ok=True)
    for p in pairs:
        formats.write_cube(root / "rgb" / f"{p.id}.cube", p.rgb)
        formats.write_cube(root / "hsi" / f"{p.id}.cube", p.hsi)


def read_pairs(root) -> list[PairedSample]:
    root = Path(root)
    rgb = dict(load_cube_dir(root / "rgb"))
    hsi = dict(load_cube_dir(root / "hsi"))
    if not hsi or set(rgb) != set(hsi):
        raise ArgumentError(f"{root} needs matching rgb/ and hsi/ cube directories")
    return [PairedSample(rgb[k], hsi[k], k) for k in sorted(hsi)]


def read_hsi(root) -> list[np.ndarray]:
    root = Path(root)
    sub = root / "hsi"
    cubes = load_cube_dir(sub if sub.is_dir() else root)
    if not cubes:
        raise ArgumentError(f"no .cube files under {root}")
    return [c for _, c in cubes]


def read_rgb(root) -> list[tuple[str, np.ndarray]]:
    root = Path(root)
    sub = root / "rgb"
    cubes = load_cube_dir(sub if sub.is_dir() else root)
    if not cubes:
        raise ArgumentError(f"no .cube files under {root}")
    return cubes


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss", "lr"])
        for h in history:
            writer.writerow([h["step"], h["epoch"], repr(h["loss"]), repr(h["lr"])])


def _step_logger(stage: str):
    return lambda r: log(stage=stage, step=r["step"], loss=r["loss"], lr=r["lr"])


def stage1_config(cfg: dict) -> StageOneConfig:
    return StageOneConfig(scales=cfg["scales"], beta=cfg["beta"], learning_rate=cfg["stage1_lr"],
                          epochs=cfg["stage1_epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                          n_entries=cfg["n_entries"], source_tag=cfg["source_tag"])


def stage2_config(cfg: dict, scales: int) -> GanetConfig:
    return GanetConfig(scales=scales, top_k=cfg["top_k"], ga_ratio=cfg["ga_ratio"],
                       learning_rate=cfg["stage2_lr"], epochs=cfg["stage2_epochs"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"])


def load_books(path):
    """Codebooks from an MCCB file or from the books inside a stage-1 checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"MCS1":
        return formats.read_stage1(path).books
    return formats.read_codebooks(path)


# -- commands --------------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> None:
    # one call so validation scenes share the training material library
    pairs = make_pairs(cfg["n_train"] + cfg["n_val"], cfg["seed"], cfg["channels"], cfg["height"],
                       cfg["width"], cfg["n_materials"], prefix="scene")
    write_pairs(out / "train", pairs[:cfg["n_train"]])
    write_pairs(out / "val", pairs[cfg["n_train"]:])
    log(event="gen-data", train=cfg["n_train"], val=cfg["n_val"], out=out)


def cmd_train_stage1(cfg: dict, out: Path) -> None:
    cubes = read_hsi(cfg["data"])
    result = train_stage1(cubes, stage1_config(cfg), on_step=_step_logger("stage1"))
    formats.write_stage1(out / "stage1.mcs1", result.model)
    formats.write_codebooks(out / "codebooks.mccb", result.books)
    write_history(out / "history.csv", result.history)
    log(event="train-stage1", steps=len(result.history), final_loss=result.losses[-1] if result.losses else math.nan)


def cmd_mix_codebooks(cfg: dict, out: Path) -> None:
    paths = _split(cfg["inputs"])
    mixed = mix_codebook_sets([load_books(p) for p in paths])
    formats.write_codebooks(out / "codebooks.mccb", mixed)
    log(event="mix-codebooks", sources=len(paths), entries=mixed[0].n_entries)


def cmd_train_stage2(cfg: dict, out: Path) -> None:
    stage1 = formats.read_stage1(cfg["stage1"])
    books = load_books(cfg["codebooks"]) if cfg["codebooks"] else None
    model = build_pipeline(stage1, stage2_config(cfg, stage1.config.scales), books)
    pairs = read_pairs(cfg["data"])
    digest = model.codebook_digest()
    history = train_stage2(pairs, model, on_step=_step_logger("stage2"))
    if model.codebook_digest() != digest:
        raise RuntimeError("codebooks changed during stage-2 training")
    formats.write_stage2(out / "stage2.mcs2", model, stage1)
    write_history(out / "history.csv", history)
    log(event="train-stage2", steps=len(history), final_loss=history[-1]["loss"] if history else math.nan,
        codebook_sha256=digest)


def cmd_infer(cfg: dict, out: Path) -> None:
    model, _, _ = formats.read_stage2(cfg["model"])
    for name, rgb in read_rgb(cfg["input"]):
        formats.write_cube(out / f"{name}.cube", predict(rgb, model))
        log(event="infer", id=name)


def cmd_tta_infer(cfg: dict, out: Path) -> None:
    model, stage1, manifest = formats.read_stage2(cfg["model"])
    tta = TtaConfig(steps=cfg["tta_steps"], learning_rate=cfg["tta_lr"], temperature=cfg["tta_temp"],
                    param_filter=tuple(manifest))
    for name, rgb in read_rgb(cfg["input"]):
        current = model if cfg["persist"] else model.clone()
        _, trajectory = adapt(current, [rgb], tta)
        formats.write_cube(out / f"{name}.cube", predict(rgb, current))
        for step, value in enumerate(trajectory):
            log(stage="tta", id=name, step=step, loss=value, lr=tta.learning_rate)
    if cfg["persist"]:
        formats.write_stage2(out / "adapted.mcs2", model, stage1)


def eval_dirs(pred_dir, truth_dir) -> list[dict]:
    pred = dict(load_cube_dir(pred_dir))
    truth_root = Path(truth_dir)
    truth = dict(load_cube_dir(truth_root / "hsi" if (truth_root / "hsi").is_dir() else truth_root))
    if not truth:
        raise ArgumentError(f"no ground-truth cubes under {truth_dir}")
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise ArgumentError(f"predictions missing for {missing}")
    return [{"id": k, **metrics(truth[k], pred[k])} for k in sorted(truth)]


def cmd_eval(cfg: dict, out: Path | None) -> None:
    rows = eval_dirs(cfg["pred"], cfg["truth"])
    if out is None:
        writer = csv.writer(sys.stdout)
        writer.writerow(["id", "rmse", "mrae", "psnr"])
        for r in rows:
            writer.writerow([r["id"], repr(r["rmse"]), repr(r["mrae"]), repr(r["psnr"])])
    else:
        write_metrics_csv(out / "metrics.csv", rows)
        log(event="eval", n=len(rows), mean_mrae=float(np.mean([r["mrae"] for r in rows])))


def cmd_perturb(cfg: dict, out: Path) -> None:
    pairs = read_pairs(cfg["data"])
    if cfg["kind"] == "gamma":
        result = [PairedSample(gamma_perturb(p.rgb, cfg["gamma"]), p.hsi, p.id) for p in pairs]
    elif cfg["kind"] == "shuffle":
        # one permutation per image, indexed by its position in the sorted set
        result = [patch_shuffle(p, cfg["patch"], seed=[cfg["seed"], i]) for i, p in enumerate(pairs)]
    else:
        raise CliUsageError(f"--kind must be gamma or shuffle, got {cfg['kind']!r}")
    write_pairs(out, result)
    log(event="perturb", kind=cfg["kind"], n=len(result))


# -- ablation --------------------------------------------------------------------------------


def parse_axis_values(axis: str, values) -> list:
    if axis not in AXES:
        raise CliUsageError(f"--axis must be one of {', '.join(AXES)}, got {axis!r}")
    raw = _split(values)
    if not raw:
        raise CliUsageError("--values is empty")
    parsed = []
    for v in raw:
        try:
            if axis in ("scales", "topk"):
                x = int(v)
                if x < 1:
                    raise ValueError
            elif axis == "ga_ratio":
                x = float(v)
                if not 0.0 <= x <= 1.0:
                    raise ValueError
            else:
                if v not in ("single", "mixture"):
                    raise ValueError
                x = v
        except ValueError:
            raise CliUsageError(f"invalid value {v!r} for axis {axis}") from None
        parsed.append(x)
    return parsed


def point_config(cfg: dict, axis: str, value) -> dict:
    point = {n: cfg[n] for n in TRAIN_OPTS}
    point["codebook_mode"] = "single"
    key = {"topk": "top_k"}.get(axis, axis)
    point[key] = value
    return point


def _stage1_key(point: dict) -> str:
    return f"S{point['scales']}_{point['codebook_mode']}"


def train_stage1_for(point: dict, train: list[PairedSample], bench: dict, path: Path) -> None:
    """Stage-1 model for one ablation point; the mixture mode adds books from a second synthetic source."""
    result = train_stage1([p.hsi for p in train], stage1_config(point))
    model = result.model
    if point["codebook_mode"] == "mixture":
        other = make_pairs(bench["n_train"], point["seed"] + 1000, bench["channels"], bench["height"],
                           bench["width"], bench["n_materials"], prefix="alt")
        alt_cfg = {**point, "source_tag": "alt", "seed": point["seed"] + 1}
        alt = train_stage1([p.hsi for p in other], stage1_config(alt_cfg))
        model.books = mix_codebook_sets([model.books, alt.books])
    formats.write_stage1(path, model)
    write_history(path.with_suffix(".history.csv"), result.history)


def run_point(args) -> dict:
    name, point, stage1_path, bench, run_dir = args
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_bytes(formats.canonical_json(point) + b"\n")
    train, val = benchmark_pairs(bench, point["seed"])
    stage1 = formats.read_stage1(stage1_path)
    model = build_pipeline(stage1, stage2_config(point, point["scales"]))
    history = train_stage2(train, model)
    write_history(run_dir / "history.csv", history)
    rows = [{"id": p.id, **metrics(p.hsi, predict(p.rgb, model))} for p in val]
    write_metrics_csv(run_dir / "metrics.csv", rows)
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("rmse", "mrae", "psnr")}
    return {"name": name, "final_loss": history[-1]["loss"] if history else math.nan, **summary}


def benchmark_pairs(bench: dict, seed: int) -> tuple[list[PairedSample], list[PairedSample]]:
    shape = dict(c=bench["channels"], h=bench["height"], w=bench["width"], n_materials=bench["n_materials"])
    pairs = make_pairs(bench["n_train"] + bench["n_val"], seed, **shape, prefix="bench")
    return pairs[:bench["n_train"]], pairs[bench["n_train"]:]


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _stage1_job(args):
    point, bench, path = args
    train, _ = benchmark_pairs(bench, point["seed"])
    train_stage1_for(point, train, bench, Path(path))
    return path


def cmd_ablate(cfg: dict, out: Path) -> None:
    axis = cfg["axis"]
    values = parse_axis_values(axis, cfg["values"])
    if cfg["jobs"] < 1:
        raise CliUsageError("--jobs must be >= 1")
    bench = {k: cfg[k] for k in ("n_train", "n_val", "channels", "height", "width", "n_materials")}
    points = [(f"{axis}={v}", point_config(cfg, axis, v)) for v in values]
    # validate every point before any training
    for _, p in points:
        stage1_config(p)
        stage2_config(p, p["scales"])
        check_schedule(bench["channels"], bench["height"], bench["width"], p["scales"])

    stage1_dir = out / "stage1"
    stage1_dir.mkdir(parents=True, exist_ok=True)
    jobs1 = {}
    for _, p in points:
        jobs1.setdefault(_stage1_key(p), (p, bench, str(stage1_dir / f"{_stage1_key(p)}.mcs1")))
    _pool_map(_stage1_job, list(jobs1.values()), cfg["jobs"])

    tasks = [(name, p, jobs1[_stage1_key(p)][2], bench, str(out / name)) for name, p in points]
    results = _pool_map(run_point, tasks, cfg["jobs"])
    with open(out / f"ablation_{axis}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "mrae", "rmse", "psnr", "final_loss"])
        for v, r in zip(values, results):
            writer.writerow([axis, v, repr(r["mrae"]), repr(r["rmse"]), repr(r["psnr"]), repr(r["final_loss"])])
            log(event="ablate", axis=axis, value=v, mrae=r["mrae"], rmse=r["rmse"], psnr=r["psnr"])


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "mix-codebooks": cmd_mix_codebooks,
    "train-stage2": cmd_train_stage2,
    "infer": cmd_infer,
    "tta-infer": cmd_tta_infer,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        if args.command == "ablate":
            parse_axis_values(cfg["axis"], cfg["values"])
    except CliUsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mcga: error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"]) if cfg.get("out") else None
    threads = os.environ.get("MCGA_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"mcga: error: MCGA_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=limit):
            if out is not None:
                save_config(out, args.command, cfg)
            HANDLERS[args.command](cfg, out)
    except CliUsageError as exc:
        print(f"mcga: error: {exc}", file=sys.stderr)
        return 2
    except (ArgumentError, ConfigurationError, ParseError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"mcga: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
