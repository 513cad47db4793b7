#!/usr/bin/env python3
"""
SeqSample - sequential k-space sampling and reconstruction on synthetic phantoms.

Subcommands:
    datagen    generate the phantom dataset and the rotated probe set
    train      train a method (sequential by default) and write its checkpoint
    baseline   train a baseline method (random, equispaced, spectrum, loupe, nonseq)
    eval       per-image SSIM / PSNR of a checkpoint on a dataset split
    compare    paired comparison of two metrics files
    gradcheck  finite-difference check of every differentiable operator
    ablate     T in {1, 2, 4} x co-design on/off grid
    probe      orientation adaptivity of learned sampling patterns
    export     per-step masks, heatmaps and reconstructions for figures
"""

import argparse
import dataclasses
import hashlib
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from artifacts import RunDirectory, read_checkpoint, read_metrics_csv
from baselines import (EQUISPACED, LOUPE, METHODS, NONSEQ, RANDOM, SEQUENTIAL, SPECTRUM,
                       build_model, random_mask, train_method)
from errors import ConfigError, GradientCheckFailed, SeqSampleError, ShapeError
from forward_model import MODES, POINT, Mask
from gradient_suite import TOLERANCE, run_suite
from metrics import (axial_spread, circular_correlation, compare, principal_axis,
                     relative_improvement_histogram)
from phantoms import (Dataset, dataset_sidecar, encode_dataset, generate_dataset, load_dataset,
                      rotated_copy)
from pipeline import (METRIC_COLUMNS, TrainConfig, evaluate, evaluate_zero_filled, mean_ssim)
from run_config import (RESOLVED_CONFIG_FILE, config_hash, data_config, phantom_spec, resolve_config,
                        train_config)

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'
PREFIX = "[SeqSample]"
ABLATION_STEPS = (1, 2, 4)

logger = logging.getLogger(__name__)


def setup_logging(out_dir: Optional[Path], verbose: bool = False) -> None:
    """Log to <out>/run.log (append) and stdout."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(out_dir / "run.log"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _resolve(args) -> Tuple[Dict, str]:
    config = resolve_config(
        args.config, args.overrides,
        seed=args.seed_override, mode=args.mode, accel=args.accel, steps=args.steps,
    )
    if args.out is not None:
        config["output_dir"] = str(args.out)
    return config, config_hash(config)


def _open_run(config: Dict, digest: str) -> RunDirectory:
    run = RunDirectory(config["output_dir"], digest)
    run.write_json(RESOLVED_CONFIG_FILE, config)
    return run


def _checkpoint_run(args, meta: Dict) -> RunDirectory:
    """Run directory for commands that read a checkpoint; artifacts carry the training config hash."""
    config = meta.get("config") or {}
    root = args.out if args.out is not None else config.get("output_dir")
    if root is None:
        raise ConfigError("no --out given and the checkpoint records no output_dir")
    return RunDirectory(root, meta.get("config_hash") or config_hash(config))


def _load_matching_dataset(path: str, extent: int) -> Dataset:
    dataset = load_dataset(path)
    if dataset.extent != extent:
        raise ShapeError(f"dataset {path} has extent {dataset.extent}, config expects {extent}")
    return dataset


def _checkpoint_metadata(method: str, cfg: TrainConfig, config: Dict, model, result) -> Dict:
    fixed = getattr(model, "fixed_mask", None)
    return {
        "method": method,
        "train": cfg.to_dict(),
        "config": config,
        "best_epoch": result.best_epoch,
        "best_val_ssim": result.best_val_ssim,
        "fixed_mask": fixed.values.tolist() if fixed is not None else None,
    }


def load_model(checkpoint: str, dataset: Optional[Dataset] = None):
    """Rebuild a trained model from a checkpoint and its sidecar."""
    params, _, meta = read_checkpoint(checkpoint)
    try:
        cfg = TrainConfig(**meta["train"])
        method = meta["method"]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"checkpoint sidecar of {checkpoint} is incomplete: {e}") from e
    fixed = meta.get("fixed_mask")
    fixed_mask = Mask(np.asarray(fixed), cfg.mode, cfg.extent) if fixed is not None else None
    model = build_model(method, dataclasses.replace(cfg, freeze_reconstructor=False), dataset, fixed_mask)
    model.params.restore(params)
    return model, cfg, meta


def _metric_rows(metrics) -> List[List]:
    return [m.to_row() for m in metrics]


def _write_metrics(run: RunDirectory, name: str, metrics, method: str) -> float:
    run.write_csv(f"{name}.csv", METRIC_COLUMNS, _metric_rows(metrics))
    finite_psnr = [m.psnr for m in metrics if math.isfinite(m.psnr)]
    summary = {
        "method": method,
        "count": len(metrics),
        "mean_ssim": mean_ssim(metrics),
        "mean_psnr": float(np.mean(finite_psnr)) if finite_psnr else math.inf,
    }
    run.write_json(f"{name}.summary.json", summary)
    return summary["mean_ssim"]


def _file_digest(*paths: str) -> str:
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    config, digest = _resolve(args)
    run = _open_run(config, digest)
    spec = phantom_spec(config)
    data = data_config(config)
    dataset = generate_dataset(spec, data.count, data.split_seed, data.fractions, data.workers)
    probe_spec = rotated_copy(spec)
    probe = generate_dataset(probe_spec, data.probe_count, data.split_seed, data.fractions, data.workers)
    for name, ds, ds_spec in (("dataset.sqds", dataset, spec), ("probe.sqds", probe, probe_spec)):
        run.write_bytes(name, encode_dataset(ds))
        run.write_json(f"{name}.json", dataset_sidecar(ds, {"phantom": ds_spec.to_dict()}))
    sizes = ", ".join(f"{name} {len(dataset.split_indices(name))}" for name in ("train", "val", "test"))
    print(f"{PREFIX} Generated {len(dataset)} phantoms ({sizes}) and {len(probe)} rotated probe phantoms")
    return 0


def _train_and_save(args, method: str) -> int:
    config, digest = _resolve(args)
    run = _open_run(config, digest)
    cfg = train_config(config)
    dataset = _load_matching_dataset(args.dataset, cfg.extent)
    log_path = run.log_path("train_log.jsonl")
    result = train_method(method, cfg, dataset, log_path=log_path, config_hash=digest)
    run.write_checkpoint("model.sqsm", result.model.params, result.optimizer,
                         _checkpoint_metadata(method, cfg, config, result.model, result))
    print(f"{PREFIX} Trained {method}: best val SSIM {result.best_val_ssim:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_train(args) -> int:
    return _train_and_save(args, args.method)


def cmd_baseline(args) -> int:
    return _train_and_save(args, args.method)


def cmd_eval(args) -> int:
    if args.zero_filled:
        config, digest = _resolve(args)
        cfg = train_config(config)
        dataset = _load_matching_dataset(args.dataset, cfg.extent)
        run = _open_run(config, digest)
        mask = random_mask(cfg.accel_spec(), np.random.default_rng(cfg.eval_seed))
        metrics = evaluate_zero_filled(dataset.split(args.split), mask)
        for m, index in zip(metrics, dataset.split_indices(args.split)):
            m.index = int(index)
        value = _write_metrics(run, "metrics", metrics, "zero_filled")
        print(f"{PREFIX} zero-filled mean SSIM {value:.4f} over {len(metrics)} images")
        return 0

    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint (or --zero-filled)")
    dataset = load_dataset(args.dataset)
    model, cfg, meta = load_model(args.checkpoint, dataset)
    run = _checkpoint_run(args, meta)
    indices = dataset.split_indices(args.split)
    metrics = evaluate(model, dataset.images[indices], cfg.eval_seed, indices, cfg.workers)
    value = _write_metrics(run, "metrics", metrics, meta["method"])
    print(f"{PREFIX} {meta['method']}: mean SSIM {value:.4f} over {len(metrics)} {args.split} images")
    return 0


def cmd_compare(args) -> int:
    rows_a = read_metrics_csv(args.metrics_a)
    rows_b = read_metrics_csv(args.metrics_b)
    index_a = [int(r["index"]) for r in rows_a]
    index_b = [int(r["index"]) for r in rows_b]
    if index_a != index_b:
        raise ShapeError("metrics files are not paired by the same image indices")
    report = compare([r["ssim"] for r in rows_a], [r["ssim"] for r in rows_b], args.name_a, args.name_b)
    run = RunDirectory(args.out, _file_digest(args.metrics_a, args.metrics_b))
    run.write_json("report.json", report.to_dict())
    fields = [k for k in report.to_dict() if k not in ("ssim_a", "ssim_b")]
    run.write_csv("report.csv", fields, [[report.to_dict()[k] for k in fields]])
    run.write_csv("histogram.csv", ["lower", "upper", "count"],
                  relative_improvement_histogram(report.ssim_a, report.ssim_b, bins=args.bins))
    print(f"{PREFIX} {report.summary()}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=range(args.seeds))
    print(f"{PREFIX} {'check':<36} {'max rel err':>12} {'time (s)':>9}  status")
    for r in results:
        print(f"{PREFIX} {r.name:<36} {r.max_error:>12.3e} {r.seconds:>9.2f}  {'PASS' if r.passed else 'FAIL'}")
    if args.out is not None:
        run = RunDirectory(args.out, hashlib.sha256(f"gradcheck:{args.seeds}".encode()).hexdigest()[:16])
        run.write_csv("gradcheck.csv", ["check", "max_rel_error", "passed"],
                      [[r.name, r.max_error, r.passed] for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradientCheckFailed(f"{len(failed)} checks above {TOLERANCE}: {', '.join(failed)}")
    return 0


def cmd_ablate(args) -> int:
    config, digest = _resolve(args)
    run = _open_run(config, digest)
    base = train_config(config)
    dataset = _load_matching_dataset(args.dataset, base.extent)
    test_idx = dataset.split_indices("test")
    grid: Dict[str, List[float]] = {"codesign_on": [], "codesign_off": []}
    per_cell: Dict[str, List[float]] = {}
    for steps in ABLATION_STEPS:
        for arm, frozen in (("codesign_on", False), ("codesign_off", True)):
            cfg = dataclasses.replace(base, steps=steps, freeze_reconstructor=frozen)
            name = f"T{steps}_{arm}"
            logger.info(f"Ablation cell {name}")
            result = train_method(SEQUENTIAL, cfg, dataset, log_path=run.log_path(f"{name}.jsonl"),
                                  config_hash=digest)
            metrics = evaluate(result.model, dataset.images[test_idx], cfg.eval_seed, test_idx, cfg.workers)
            grid[arm].append(_write_metrics(run, name, metrics, name))
            per_cell[name] = [m.ssim for m in metrics]

    reports = {}
    for steps in ABLATION_STEPS:
        on, off = per_cell[f"T{steps}_codesign_on"], per_cell[f"T{steps}_codesign_off"]
        reports[f"T{steps}_on_vs_off"] = compare(on, off, f"T{steps} co-design", f"T{steps} frozen").to_dict()
    first, last = ABLATION_STEPS[0], ABLATION_STEPS[-1]
    reports[f"T{last}_vs_T{first}"] = compare(per_cell[f"T{last}_codesign_on"], per_cell[f"T{first}_codesign_on"],
                                              f"T{last}", f"T{first}").to_dict()
    run.write_json("ablation.json", {"steps": list(ABLATION_STEPS), "mean_ssim": grid, "reports": reports})
    run.write_csv("ablation.csv", ["steps", "codesign_on", "codesign_off"],
                  [[s, on, off] for s, on, off in zip(ABLATION_STEPS, grid["codesign_on"], grid["codesign_off"])])
    print(f"{PREFIX} {'T':>3} {'co-design':>10} {'frozen':>10}")
    for s, on, off in zip(ABLATION_STEPS, grid["codesign_on"], grid["codesign_off"]):
        print(f"{PREFIX} {s:>3} {on:>10.4f} {off:>10.4f}")
    return 0


def _pattern_axes(model, images: np.ndarray, eval_seed: int) -> List[float]:
    """Principal axis of the indices each episode acquired beyond the low-frequency region."""
    axes = []
    for i, image in enumerate(images):
        trace = model.run_episode(image[None], np.random.default_rng([eval_seed, i]))
        learned = trace.steps[-1].mask[0] - trace.steps[0].mask[0]
        if model.spec.mode == POINT and len(trace.steps) == 1:
            learned = trace.steps[0].mask[0]
        axes.append(principal_axis(learned.reshape(model.spec.extent, model.spec.extent)))
    return axes


def cmd_probe(args) -> int:
    dataset = load_dataset(args.dataset)
    model, cfg, meta = load_model(args.checkpoint)
    if cfg.mode != POINT:
        raise ConfigError("the adaptivity probe needs a point-sampling model")
    if dataset.extent != cfg.extent:
        raise ShapeError(f"probe set extent {dataset.extent} vs model extent {cfg.extent}")
    run = _checkpoint_run(args, meta)

    images = dataset.images
    power = [np.abs(np.fft.fftshift(np.fft.fft2(img))) ** 2 for img in images.astype(np.float64)]
    phantom_axes = [principal_axis(p) for p in power]
    learned_axes = _pattern_axes(model, images, cfg.eval_seed)
    result = {
        "method": meta["method"],
        "count": len(images),
        "learned_correlation": circular_correlation(learned_axes, phantom_axes),
        "learned_spread": axial_spread(learned_axes),
    }
    static_axes = [math.nan] * len(images)
    if args.static_checkpoint is not None:
        static, _, static_meta = load_model(args.static_checkpoint)
        static_axes = _pattern_axes(static, images, cfg.eval_seed)
        result["static_method"] = static_meta["method"]
        result["static_correlation"] = circular_correlation(static_axes, phantom_axes)
        result["static_spread"] = axial_spread(static_axes)
    run.write_json("probe.json", result)
    run.write_csv("probe.csv", ["index", "phantom_axis", "learned_axis", "static_axis"],
                  [[i, p, l, s] for i, (p, l, s) in enumerate(zip(phantom_axes, learned_axes, static_axes))])
    print(f"{PREFIX} learned-pattern vs spectrum axis circular correlation: {result['learned_correlation']:.3f}")
    if "static_spread" in result:
        print(f"{PREFIX} static baseline axis spread: {result['static_spread']:.4f} rad")
    return 0


def _as_2d(values: np.ndarray, mask_mode: str, extent: int) -> np.ndarray:
    if mask_mode == POINT:
        return values.reshape(extent, extent)
    return np.broadcast_to(values[None, :], (extent, extent))


def cmd_export(args) -> int:
    dataset = load_dataset(args.dataset)
    model, cfg, meta = load_model(args.checkpoint, dataset)
    run = _checkpoint_run(args, meta)
    indices = dataset.split_indices(args.split)[: args.count]
    for index in indices:
        image = dataset.images[index]
        trace = model.run_episode(image[None], np.random.default_rng([cfg.eval_seed, int(index)]))
        stem = f"image{index:05d}"
        run.write_pgm(f"{stem}/ground_truth.pgm", image, lo=0.0, hi=1.0)
        for t, record in enumerate(trace.steps):
            run.write_mask(f"{stem}/step{t}_mask", Mask(record.mask[0], cfg.mode, cfg.extent))
            recon = record.x_tilde.value[0, 0]
            run.write_pgm(f"{stem}/step{t}_reconstruction.pgm", recon, lo=0.0, hi=1.0)
            run.write_csv(f"{stem}/step{t}_reconstruction.csv", [f"c{j}" for j in range(cfg.extent)],
                          recon.tolist())
            if record.heatmap is not None:
                run.write_pgm(f"{stem}/step{t}_heatmap.pgm", _as_2d(record.heatmap[0], cfg.mode, cfg.extent),
                              lo=0.0, hi=1.0)
    print(f"{PREFIX} Exported {len(indices)} episodes of {meta['method']} to {run.root}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _run_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (merged over the defaults)")
    common.add_argument("--overrides", help="KEY=VALUE file of dotted config overrides (train.epochs=5)")
    common.add_argument("--out", help="Run directory (default: output_dir from the config)")
    common.add_argument("--seed-override", type=int, help="Replace train.seed and phantom.seed")
    common.add_argument("--mode", choices=MODES, help="Sampling mode")
    common.add_argument("--accel", type=float, help="Acceleration factor")
    common.add_argument("--steps", type=int, help="Number of acquisition steps T")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="SeqSample - sequential k-space sampling and reconstruction on synthetic phantoms"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _run_options()

    p = sub.add_parser("datagen", parents=[common], help="Generate phantom datasets")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--dataset", required=True, help="Dataset file (.sqds)")
    p.add_argument("--method", choices=METHODS, default=SEQUENTIAL, help="Method to train (default: sequential)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", parents=[common], help="Train a baseline method")
    p.add_argument("--dataset", required=True, help="Dataset file (.sqds)")
    p.add_argument("--method", required=True, choices=[RANDOM, EQUISPACED, SPECTRUM, LOUPE, NONSEQ])
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", help="Checkpoint file (.sqsm) with its .json sidecar")
    p.add_argument("--dataset", required=True, help="Dataset file (.sqds)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--zero-filled", action="store_true",
                   help="Score |zero-filled| images under a random mask from the config, no network")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="Paired comparison of two metrics files")
    p.add_argument("metrics_a", help="Metrics CSV of method A")
    p.add_argument("metrics_b", help="Metrics CSV of method B")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--name-a", default="A")
    p.add_argument("--name-b", default="B")
    p.add_argument("--bins", type=int, default=20, help="Histogram bins (default: 20)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every operator")
    p.add_argument("--seeds", type=int, default=5, help="Number of seeds (default: 5)")
    p.add_argument("--out", help="Optional directory for gradcheck.csv")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="Step-count x co-design ablation")
    p.add_argument("--dataset", required=True, help="Dataset file (.sqds)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="Orientation adaptivity probe")
    p.add_argument("--checkpoint", required=True, help="Learned point-sampling checkpoint")
    p.add_argument("--static-checkpoint", help="Static-mask checkpoint for the rotation-independence check")
    p.add_argument("--dataset", required=True, help="Rotated probe set (probe.sqds)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export", help="Per-step figure data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--count", type=int, default=4, help="Number of images (default: 4)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_export)
    return parser


def _log_dir(args) -> Optional[Path]:
    if getattr(args, "out", None):
        return Path(args.out)
    if args.command in ("datagen", "train", "baseline", "ablate"):
        try:
            config, _ = _resolve(args)
        except SeqSampleError:
            return None
        return Path(config["output_dir"])
    return None


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for command-line usage."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(_log_dir(args), args.verbose)
    try:
        return args.func(args)
    except SeqSampleError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: io_error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        print(f"\n{PREFIX} Interrupted by user.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
