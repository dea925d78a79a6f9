"""Command-line experiment runner.

Subcommands::

    scal train    --config PATH [--out DIR] [--seed INT] [--resume CKPT]
    scal ablate   --config PATH --modes scal,no_conditions,... [--out DIR] [--seed INT]
    scal analyze  RUN_DIR [--resolution INT]
    scal gen-data --config PATH [--out DIR] [--seed INT]

Exit codes: 0 success, 2 configuration error, 3 runtime or divergence error.
Every run directory ends with ``manifest.json``, written last and atomically,
listing each output file with its size and SHA-256.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, datagen, metrics, training
from . import autodiff as ad
from . import config as config_mod
from .errors import ConfigError, ScalError, TrainingDivergenceError

log = logging.getLogger("scal.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

MANIFEST = "manifest.json"
METRICS_CSV = "metrics.csv"
SUMMARY_JSON = "summary.json"
CHECKPOINT = "checkpoint.ckpt"
CONFIG_SNAPSHOT = "config.cfg"
PROBE_SEEDS = 5


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _inventory(root: Path) -> list[dict]:
    files = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name == MANIFEST and p.parent == root or p.name.endswith(".tmp"):
            continue
        blob = p.read_bytes()
        files.append({"path": p.relative_to(root).as_posix(), "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
    return files


def write_manifest(root: Path, cfg, started: str, status: str, terminal: dict, **extra) -> None:
    """Inventory everything under ``root`` and write the manifest last."""
    manifest = {
        "software": {"name": "scal", "version": __version__},
        "config": config_mod.to_dict(cfg) if cfg is not None else None,
        "started": started,
        "finished": _now(),
        "status": status,
        "files": _inventory(root),
        "terminal": terminal,
        **extra,
    }
    _write_atomic(root / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _resolve_config(path, out=None, seed=None):
    cfg = config_mod.load(path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output"] = {"directory": str(out)}
    return cfg.replace(**overrides) if overrides else cfg


def _report_config_error(err: ConfigError) -> int:
    print("configuration error:", file=sys.stderr)
    for problem in err.problems:
        print(f"  {problem}", file=sys.stderr)
    return EXIT_CONFIG


def _datasets(cfg):
    return datagen.generate(cfg.dataset.name, cfg.dataset.params, cfg.dataset.seed)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _write_metrics(root: Path, cfg, run_log) -> None:
    if "csv" in cfg.output.formats:
        _write_atomic(root / METRICS_CSV, run_log.to_csv())
    if "json" in cfg.output.formats:
        _write_atomic(root / SUMMARY_JSON, metrics.summary_json(run_log))


def run_training(cfg, resume_state=None) -> tuple[int, metrics.MetricsLog | None]:
    """Train one configuration into ``cfg.output.directory``; returns (exit code, log)."""
    root = Path(cfg.output.directory)
    root.mkdir(parents=True, exist_ok=True)
    started = _now()
    stale = root / MANIFEST
    if stale.exists():
        stale.unlink()
    _write_atomic(root / CONFIG_SNAPSHOT, config_mod.to_text(cfg))

    every = cfg.training.checkpoint_every

    def on_epoch_end(state):
        _write_metrics(root, cfg, state.log)
        if every and state.epoch % every == 0:
            ckpt_dir = root / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            checkpoint.save(ckpt_dir / f"epoch_{state.epoch:04d}.ckpt", state, cfg)

    try:
        source, target = _datasets(cfg)
        result = training.train(cfg, source, target, state=resume_state, on_epoch_end=on_epoch_end)
    except TrainingDivergenceError as e:
        log.error("training diverged: %s", e)
        _write_atomic(root / "error.json", json.dumps({"error": str(e), "diagnostics": e.diagnostics}, indent=2, default=str) + "\n")
        write_manifest(root, cfg, started, "diverged", {"error": str(e)})
        return EXIT_RUNTIME, None
    except ScalError as e:
        log.error("training failed: %s", e)
        _write_atomic(root / "error.json", json.dumps({"error": str(e)}, indent=2) + "\n")
        write_manifest(root, cfg, started, "failed", {"error": str(e)})
        return EXIT_RUNTIME, None

    _write_metrics(root, cfg, result.log)
    checkpoint.save(root / CHECKPOINT, result.state, cfg)
    write_manifest(root, cfg, started, "ok", dict(result.log.terminal))
    return EXIT_OK, result.log


def cmd_train(config_path=None, out=None, seed=None, resume=None) -> int:
    resume_state = None
    try:
        if resume is not None:
            resume_state, ckpt_cfg = checkpoint.load(resume)
            cfg = ckpt_cfg
            if config_path is not None:
                given = _resolve_config(config_path, seed=seed)
                mine = config_mod.to_dict(ckpt_cfg)
                theirs = config_mod.to_dict(given)
                mine.pop("output"), theirs.pop("output")
                if mine != theirs:
                    raise ConfigError("config: differs from the checkpoint's config; resume needs the same experiment")
            if out is not None:
                cfg = cfg.replace(output={"directory": str(out)})
        elif config_path is None:
            raise ConfigError("--config: required unless --resume is given")
        else:
            cfg = _resolve_config(config_path, out, seed)
    except ConfigError as e:
        return _report_config_error(e)
    except (ScalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    code, _ = run_training(cfg, resume_state)
    return code


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

COMPARISON_HEADER = ("mode", "status", "final_target_accuracy", "acc_target_fs", "acc_target_f", "acc_pseudo")


def parse_modes(text: str | None) -> list[tuple[str, dict]]:
    """``scal,no_conditions,0.25,source_only`` -> [(variant name, training overrides)].

    Ablation names select the conditioning variant; numbers in [0, 1] are
    label-noise levels (predicting with the source classifier);
    ``source_only`` is the unconditioned run with lambda = 0.
    """
    tokens = [t.strip() for t in (text or "").split(",") if t.strip()]
    if not tokens:
        raise ConfigError("--modes: at least one mode is required")
    variants, problems, seen = [], [], set()
    for tok in tokens:
        if tok in config_mod.ABLATIONS:
            variants.append((tok, {"ablation": tok}))
        elif tok == "source_only":
            variants.append((tok, {"ablation": "no_conditions", "lam": 0.0}))
        else:
            try:
                nl = float(tok)
            except ValueError:
                problems.append(f"--modes: unknown mode {tok!r} (ablations {list(config_mod.ABLATIONS)}, source_only, or a noise level)")
                continue
            if not 0.0 <= nl <= 1.0:
                problems.append(f"--modes: noise level {tok} outside [0, 1]")
                continue
            variants.append((f"noise_{nl:g}", {"ablation": "scal", "noise_level": nl, "predict_head": "source"}))
        if variants and variants[-1][0] in seen:
            problems.append(f"--modes: duplicate mode {tok!r}")
        elif variants:
            seen.add(variants[-1][0])
    if problems:
        raise ConfigError(problems)
    return variants


def cmd_ablate(config_path, modes, out=None, seed=None) -> int:
    try:
        base = _resolve_config(config_path, out, seed)
        variants = parse_modes(modes)
    except ConfigError as e:
        return _report_config_error(e)
    root = Path(base.output.directory)
    root.mkdir(parents=True, exist_ok=True)
    started = _now()
    rows, failed = [], 0
    for name, overrides in variants:
        cfg = base.replace(training=overrides, output={"directory": str(root / name)})
        log.info("variant %s", name)
        try:
            code, run_log = run_training(cfg)
        except Exception:  # keep sibling variants alive
            log.exception("variant %s crashed", name)
            code, run_log = EXIT_RUNTIME, None
        if code != EXIT_OK:
            failed += 1
            rows.append([name, "failed", "", "", "", ""])
            continue
        rec = run_log.records[-1]
        rows.append([
            name, "ok", repr(float(run_log.terminal["final_target_accuracy"])),
            repr(float(rec.acc_target_fs)), repr(float(rec.acc_target_f)), repr(float(rec.acc_pseudo)),
        ])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_HEADER)
    w.writerows(rows)
    _write_atomic(root / "comparison.csv", buf.getvalue())
    write_manifest(root, base, started, "ok" if not failed else "partial", {"variants": [r[0] for r in rows], "failed": failed})
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _probe_seeds(seed: int, count: int) -> list[int]:
    rng = training.child_rng(seed, "probe")
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=count)]


def _grid_bounds(*arrays: np.ndarray, pad: float = 0.5):
    x = np.vstack(arrays)
    lo, hi = x.min(axis=0) - pad, x.max(axis=0) + pad
    return (lo[0], hi[0]), (lo[1], hi[1])


def cmd_analyze(run_dir, resolution: int = 100) -> int:
    """Add divergence and discriminability measures to a finished run.

    Proxy A-distance is averaged over several probe seeds derived from the
    run seed; the ideal joint error needs target labels and is skipped
    without them.
    """
    root = Path(run_dir)
    started = _now()
    try:
        manifest = read_manifest(root)
        state, cfg = checkpoint.load(root / CHECKPOINT)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ScalError as e:
        print(f"error: {root / CHECKPOINT}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if manifest.get("status") != "ok":
        print(f"error: run in {root} did not finish (status {manifest.get('status')!r})", file=sys.stderr)
        return EXIT_RUNTIME
    if resolution < 2:
        return _report_config_error(ConfigError("--resolution: must be >= 2"))

    try:
        source, target = _datasets(cfg)
    except ScalError as e:
        print(f"error: cannot regenerate data: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    nets = state.networks
    with ad.no_grad():
        fs = nets.features(source.features).values
        ft = nets.features(target.features).values

    seeds = _probe_seeds(cfg.seed, PROBE_SEEDS)
    terminal = dict(state.log.terminal)
    terminal["a_distance"] = float(np.mean([metrics.proxy_a_distance(fs, ft, seed=s) for s in seeds]))
    if target.labels is not None:
        terminal["ideal_joint_error"] = metrics.ideal_joint_error(fs, source.labels, ft, target.labels, seed=seeds[0])
    else:
        log.warning("target labels unavailable; ideal_joint_error skipped")

    if nets.in_dim == 2:
        grid = datagen.grid_2d(_grid_bounds(source.features, target.features), resolution)
        rows = metrics.decision_boundary_export(nets, grid, training.resolve_head(cfg))
        _write_atomic(root / "boundary.csv", metrics.boundary_csv(rows))
    else:
        log.warning("input dimension is %d, not 2; decision boundary export skipped", nets.in_dim)

    summary = {}
    if (root / SUMMARY_JSON).is_file():
        summary = json.loads((root / SUMMARY_JSON).read_text())
    summary.update(terminal)
    _write_atomic(root / SUMMARY_JSON, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(root, cfg, manifest.get("started", started), "ok", summary, analyzed=_now())
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(config_path, out=None, seed=None) -> int:
    """Write the configured source and target samples to ``dataset.csv``."""
    try:
        cfg = _resolve_config(config_path, out)
        if seed is not None:
            cfg = cfg.replace(dataset={"seed": seed})
    except ConfigError as e:
        return _report_config_error(e)
    root = Path(cfg.output.directory)
    started = _now()
    try:
        source, target = _datasets(cfg)
    except ScalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / "dataset.csv.tmp"
    datagen.write_csv(tmp, source, target)
    os.replace(tmp, root / "dataset.csv")
    write_manifest(root, cfg, started, "ok", {"source_rows": len(source), "target_rows": len(target)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scal", description="Structure-conditioned adversarial domain adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by an earlier run")

    p = sub.add_parser("ablate", help="run several variants and compare final target accuracy")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", required=True, help="comma list of ablation names, source_only, or noise levels in [0, 1]")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("analyze", help="A-distance, ideal joint error and decision boundary for a finished run")
    p.add_argument("run_dir")
    p.add_argument("--resolution", type=int, default=100, help="grid points per axis for the boundary export")

    p = sub.add_parser("gen-data", help="write the configured dataset as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="override the dataset seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed, args.resume)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.modes, args.out, args.seed)
    if args.command == "analyze":
        return cmd_analyze(args.run_dir, args.resolution)
    return cmd_gen_data(args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
