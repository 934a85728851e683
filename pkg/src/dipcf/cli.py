"""Command-line entry point: ``dipcf {train,invert,counterfactual,evaluate}``.

Every command writes a fresh run directory under the output root
(``--output-root``, else ``$DIPCF_OUTPUT_ROOT``, else ``./runs``). Options
can also come from a flat ``key = value`` file passed with ``--config``;
explicit flags win over the file, and the file wins over the defaults.
The merged options are echoed to ``config.txt`` in the run directory, and
that file can be fed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .core_model import encode, predict_class, predictor_forward
from .data import (
    CorruptionSpec,
    corrupt,
    load_image,
    load_image_folder,
    load_mask,
    localization_ratio,
    make_synthetic_lesions,
    psnr,
    save_mask,
    stratified_split,
)
from .errors import InputError, NumericalError, StateError
from .inversion import (
    InversionConfig,
    format_value,
    generate_counterfactual,
    recover_preimage,
    write_config_echo,
    write_result_archive,
)
from .loss_estimator import TrainConfig, estimate_loss, train_joint

log = logging.getLogger("dipcf")

OUTPUT_ROOT_ENV = "DIPCF_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _optional(kind):
    def parse(text):
        return None if text in ("", "None", "none") else kind(text)
    return parse


# name -> (parser, default, help). Names double as config-file keys.
TRAIN_OPTIONS = {
    "data": (str, "synthetic", "'synthetic' or a folder of images with a labels CSV"),
    "labels": (_optional(str), None, "labels CSV (default: <data>/labels.csv)"),
    "n_samples": (int, 600, "synthetic dataset size"),
    "data_seed": (int, 0, "seed of the synthetic dataset"),
    "image_size": (int, 32, "side length images are resampled to"),
    "epochs": (int, 20, "training epochs"),
    "batch_size": (int, 32, "mini-batch size (even)"),
    "step_size": (float, 1e-3, "Adam learning rate"),
    "beta1": (float, 1.0, "weight of the primary loss"),
    "beta2": (float, 0.5, "weight of the ranking loss"),
    "margin": (float, 1.0, "ranking-loss margin"),
    "split_fraction": (float, 0.9, "training share of the stratified split"),
    "seed": (int, 0, "training seed"),
}

_SOURCE_OPTIONS = {
    "checkpoint": (str, None, "checkpoint written by 'train' (required)"),
    "image": (_optional(str), None, "input image file"),
    "synthetic_index": (_optional(int), None, "index into the checkpoint's synthetic held-out set"),
    "mask": (_optional(str), None, "lesion mask image for the localization ratio"),
    "block": (int, 1, "1-based residual block whose output is inverted"),
    "iters": (int, 5000, "optimizer iterations"),
    "step_size": (float, 0.01, "generator Adam learning rate"),
    "target_loss": (float, 0.0, "target value of the loss estimate"),
    "seed": (int, 0, "generator seed"),
}

INVERT_OPTIONS = {
    **_SOURCE_OPTIONS,
    "mode": (str, "dip_only", "dip_only, dip_regularized, explicit_tv or explicit_alpha"),
    "corrupt": (_optional(str), None, "corrupt the input first: occlusion:<patch> or blur:<sigma>"),
    "lambda1": (float, 0.02, "weight of the loss-estimate term"),
    "lambda_explicit": (_optional(float), None, "weight of the explicit prior (explicit modes)"),
}

COUNTERFACTUAL_OPTIONS = {
    **_SOURCE_OPTIONS,
    "target": (str, None, "target class, as index or name (required)"),
    "lambda1": (float, 0.02, "weight of the loss-estimate term"),
    "lambda2": (float, 0.1, "weight of the targeted cross-entropy"),
}

EVALUATE_OPTIONS = {}

COMMAND_OPTIONS = {
    "train": TRAIN_OPTIONS,
    "invert": INVERT_OPTIONS,
    "counterfactual": COUNTERFACTUAL_OPTIONS,
    "evaluate": EVALUATE_OPTIONS,
}


# ---------------------------------------------------------------- config handling

def read_config_file(path, options) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        if key not in options:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = options[key][0](value.strip())
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def merge_config(options, file_values, flag_values) -> dict:
    merged = {name: default for name, (_, default, _) in options.items()}
    merged.update(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def resolve_output_root(flag) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)


def default_run_id(command, seed) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return f"{command}-{stamp}-seed{seed}" if seed is not None else f"{command}-{stamp}"


def reserve_run_dir(args, seed) -> Path:
    run_id = args.run_id or default_run_id(args.command, seed)
    run_dir = resolve_output_root(args.output_root) / run_id
    if run_dir.exists():
        raise InputError(f"run directory already exists: {run_dir}")
    return run_dir


def echo_items(cfg: dict, run_dir: Path) -> dict:
    return {"# run_id": run_dir.name, "# output_dir": str(run_dir.parent), **cfg}


def publish(staging: Path, run_dir: Path):
    """Move a completed staging directory into place; never overwrite."""
    run_dir.parent.mkdir(parents=True, exist_ok=True)
    if run_dir.exists():
        raise InputError(f"run directory already exists: {run_dir}")
    try:
        os.rename(staging, run_dir)
    except OSError as exc:
        raise InputError(f"run directory already exists: {run_dir}") from exc


# ---------------------------------------------------------------- train

def load_training_data(cfg):
    if cfg["data"] == "synthetic":
        return make_synthetic_lesions(cfg["n_samples"], seed=cfg["data_seed"]), {
            "data": "synthetic", "n_samples": cfg["n_samples"], "data_seed": cfg["data_seed"],
        }
    size = (cfg["image_size"], cfg["image_size"])
    ds = load_image_folder(cfg["data"], cfg["labels"], size=size)
    return ds, {"data": str(Path(cfg["data"]).resolve())}


def cmd_train(cfg, run_dir) -> int:
    dataset, provenance = load_training_data(cfg)
    tc = TrainConfig(
        beta1=cfg["beta1"], beta2=cfg["beta2"], margin=cfg["margin"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], step_size=cfg["step_size"], seed=cfg["seed"],
        split_fraction=cfg["split_fraction"],
    )
    bundle = train_joint(dataset, tc)
    bundle.metadata.update(provenance)

    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=_ensure(run_dir.parent)))
    try:
        save_checkpoint(bundle, staging / "checkpoint.pt")
        with open(staging / "train_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_pri", "L_aux", "val_accuracy", "val_rank_correlation"])
            for row in bundle.log:
                writer.writerow([row.epoch] + [format_value(float(v)) for v in
                                               (row.L_pri, row.L_aux, row.val_accuracy, row.val_rank_correlation)])
        write_config_echo(staging / "config.txt", echo_items(cfg, run_dir))
        publish(staging, run_dir)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    last = bundle.log[-1]
    print(f"wrote {run_dir}")
    print(f"val_accuracy={last.val_accuracy:.4f} "
          f"val_rank_correlation={last.val_rank_correlation:.4f}")
    return 0


def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- invert / counterfactual

def load_source(cfg, bundle):
    """Return ``(image, mask or None, description)`` for the run input."""
    if (cfg["image"] is None) == (cfg["synthetic_index"] is None):
        raise InputError("give exactly one of --image or --synthetic-index")
    h, w, _ = bundle.model.input_shape
    mask = None
    if cfg["image"] is not None:
        path = Path(cfg["image"])
        if not path.is_file():
            raise InputError(f"image not found: {path}")
        image = load_image(path, size=(h, w))
    else:
        meta = bundle.metadata
        if meta.get("data") != "synthetic":
            raise InputError("--synthetic-index needs a checkpoint trained on synthetic data")
        ds = make_synthetic_lesions(int(meta["n_samples"]), seed=int(meta["data_seed"]))
        _, holdout = stratified_split(ds, bundle.config.split_fraction, bundle.config.seed)
        idx = cfg["synthetic_index"]
        if not 0 <= idx < len(holdout):
            raise InputError(f"synthetic index {idx} outside [0, {len(holdout) - 1}]")
        image = holdout.items[idx][0]
        mask = holdout.masks[idx]
    if cfg["mask"] is not None:
        mask = load_mask(cfg["mask"])
    if mask is not None and mask.shape != (h, w):
        raise InputError(f"mask shape {mask.shape} does not match image {h}x{w}")
    return image, mask


@torch.no_grad()
def describe_image(x, bundle):
    _, taps = predictor_forward(x, bundle.model)
    label, _ = predict_class(x, bundle.model)
    return float(estimate_loss(taps, bundle.head)[0]), label


def cmd_invert(cfg, run_dir) -> int:
    bundle = load_checkpoint(cfg["checkpoint"])
    clean, _ = load_source(cfg, bundle)
    x_in = clean
    if cfg["corrupt"] is not None:
        x_in = corrupt(clean, CorruptionSpec.parse(cfg["corrupt"], seed=cfg["seed"]))
    ic = InversionConfig(
        mode=cfg["mode"], block_index=cfg["block"], iterations=cfg["iters"], step_size=cfg["step_size"],
        lambda1=cfg["lambda1"], target_loss=cfg["target_loss"], seed=cfg["seed"],
        lambda_explicit=cfg["lambda_explicit"],
    )
    target = encode(torch.from_numpy(x_in), ic.block_index, bundle.model).detach()
    result = recover_preimage(target, clean, bundle.model, bundle.head, ic)

    input_lhat, input_class = describe_image(x_in, bundle)
    metrics = {
        "mode": ic.mode,
        "block": ic.block_index,
        "iterations": ic.iterations,
        "seed": ic.seed,
        "final_encoding_distance": result.final_encoding_distance,
        "final_estimated_loss": result.final_estimated_loss,
        "predicted_class": result.predicted_class,
        "psnr_vs_reference": result.psnr_vs_reference,
        "best_iteration": result.best_iteration,
        "input_estimated_loss": input_lhat,
        "input_predicted_class": input_class,
        "input_psnr_vs_reference": psnr(x_in, clean),
    }
    extra = {"input": x_in, "reference": clean}
    _write_run(run_dir, result, cfg, metrics, extra)
    print(f"wrote {run_dir}")
    print(f"psnr={result.psnr_vs_reference:.2f} "
          f"estimated_loss={result.final_estimated_loss:.4f} predicted_class={result.predicted_class}")
    return 0


def parse_target(text, class_names) -> int:
    if text is None:
        raise InputError("--target is required")
    if text in class_names:
        return class_names.index(text)
    try:
        return int(text)
    except ValueError:
        raise InputError(f"unknown target class {text!r}; classes are {class_names}") from None


def cmd_counterfactual(cfg, run_dir) -> int:
    bundle = load_checkpoint(cfg["checkpoint"])
    x0, mask = load_source(cfg, bundle)
    target = parse_target(cfg["target"], list(bundle.class_names))
    ic = InversionConfig(
        block_index=cfg["block"], iterations=cfg["iters"], step_size=cfg["step_size"],
        lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], target_loss=cfg["target_loss"], seed=cfg["seed"],
    )
    result = generate_counterfactual(x0, target, bundle.model, bundle.head, ic)
    loc = localization_ratio(result.difference_map, mask) if mask is not None else None
    metrics = {
        "mode": "counterfactual",
        "block": ic.block_index,
        "iterations": ic.iterations,
        "seed": ic.seed,
        "lambda1": ic.lambda1,
        "lambda2": ic.lambda2,
        "original_class": result.original_class,
        "target_class": result.target_class,
        "predicted_class": result.predicted_class,
        "flipped": int(result.flipped),
        "localization_ratio": loc,
        "final_encoding_distance": result.final_encoding_distance,
        "final_estimated_loss": result.final_estimated_loss,
        "psnr_vs_reference": result.psnr_vs_reference,
        "best_iteration": result.best_iteration,
    }
    extra = {"input": x0}
    _write_run(run_dir, result, cfg, metrics, extra, mask)
    print(f"wrote {run_dir}")
    print(f"class {result.original_class} -> {result.predicted_class} "
          f"(target {target}, flipped={result.flipped})"
          + (f" localization={loc:.4f}" if loc is not None else ""))
    return 0


def _write_run(run_dir, result, cfg, metrics, extra, mask=None):
    staging_root = Path(tempfile.mkdtemp(prefix=".staging-", dir=_ensure(run_dir.parent)))
    try:
        staging = write_result_archive(staging_root / "run", result, echo_items(cfg, run_dir), metrics, extra)
        if mask is not None:
            save_mask(staging / "mask.png", mask)
        publish(staging, run_dir)
    finally:
        shutil.rmtree(staging_root, ignore_errors=True)


# ---------------------------------------------------------------- evaluate

def read_run(run_dir: Path) -> dict:
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise InputError(f"{run_dir} has no metrics.csv")
    with open(metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise InputError(f"{metrics_path} should hold exactly one row")
    cfg = {}
    config_path = run_dir / "config.txt"
    if config_path.is_file():
        for line in config_path.read_text().splitlines():
            key, _, value = line.partition("=")
            if not line.startswith("#") and key.strip():
                cfg[key.strip()] = value.strip()
    return {"run": run_dir.name, **rows[0], "_config": cfg}


def _num(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


PAIR_KEYS = ("checkpoint", "image", "synthetic_index", "corrupt", "block", "iters", "seed", "target_loss")


def lhat_gaps(runs):
    """Pair dip_only / dip_regularized runs on identical inputs and seeds."""
    groups = {}
    for r in runs:
        if r.get("mode") in ("dip_only", "dip_regularized"):
            key = tuple(r["_config"].get(k, "") for k in PAIR_KEYS)
            groups.setdefault(key, {})[r["mode"]] = r
    gaps = []
    for key in sorted(groups):
        g = groups[key]
        if "dip_only" in g and "dip_regularized" in g:
            gaps.append(_num(g["dip_regularized"]["final_estimated_loss"])
                        - _num(g["dip_only"]["final_estimated_loss"]))
    return gaps


def summarize_runs(runs):
    modes = sorted({r.get("mode", "") for r in runs})
    gaps = lhat_gaps(runs)
    out = []
    for mode in modes:
        sel = [r for r in runs if r.get("mode", "") == mode]
        flips = [_num(r.get("flipped")) for r in sel]
        out.append({
            "mode": mode,
            "runs": len(sel),
            "mean_psnr": _mean(_num(r.get("psnr_vs_reference")) for r in sel),
            "mean_estimated_loss": _mean(_num(r.get("final_estimated_loss")) for r in sel),
            "mean_localization_ratio": _mean(_num(r.get("localization_ratio")) for r in sel),
            "flip_rate": _mean(flips),
            "paired_lhat_gap": _mean(gaps) if mode == "dip_regularized" else None,
            "paired_lower_count": sum(g < 0 for g in gaps) if mode == "dip_regularized" and gaps else None,
            "pairs": len(gaps) if mode == "dip_regularized" else None,
        })
    return out


def _write_table(path, rows):
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields and not k.startswith("_")]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: "" if r.get(k) is None else format_value(r.get(k)) for k in fields})


def plot_report(path, runs, summary):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    names = [r["run"] for r in runs]
    ps = [_num(r.get("psnr_vs_reference")) or 0.0 for r in runs]
    axes[0].bar(range(len(runs)), ps, color="tab:blue")
    axes[0].set_xticks(range(len(runs)), names, rotation=60, ha="right", fontsize=6)
    axes[0].set_ylabel("PSNR vs reference (dB)")
    locs = [(s["mode"], s["mean_localization_ratio"]) for s in summary if s["mean_localization_ratio"] is not None]
    if locs:
        axes[1].bar([m for m, _ in locs], [v for _, v in locs], color="tab:orange")
        axes[1].set_ylabel("mean localization ratio")
    else:
        lh = [(s["mode"], s["mean_estimated_loss"]) for s in summary if s["mean_estimated_loss"] is not None]
        axes[1].bar([m for m, _ in lh], [v for _, v in lh], color="tab:green")
        axes[1].set_ylabel("mean estimated loss")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def cmd_evaluate(run_dirs, run_dir) -> int:
    if not run_dirs:
        raise InputError("evaluate needs at least one run directory")
    runs = []
    for d in sorted(Path(p) for p in run_dirs):
        if not d.is_dir():
            raise InputError(f"run directory not found: {d}")
        runs.append(read_run(d))
    summary = summarize_runs(runs)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=_ensure(run_dir.parent)))
    try:
        _write_table(staging / "report.csv", runs)
        _write_table(staging / "summary.csv", summary)
        plot_report(staging / "report.png", runs, summary)
        with open(staging / "config.txt", "w") as fh:
            fh.write(f"# run_id = {run_dir.name}\n")
            for d in sorted(run_dirs):
                fh.write(f"run = {d}\n")
        publish(staging, run_dir)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote {run_dir}")
    print(f"{len(runs)} runs aggregated")
    for s in summary:
        if s["paired_lhat_gap"] is not None:
            print(f"  paired estimated-loss gap (dip_regularized - dip_only): {s['paired_lhat_gap']:+.4f} "
                  f"over {s['pairs']} pairs, lower in {s['paired_lower_count']}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipcf", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMAND_OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--output-root", help=f"parent of run directories (env {OUTPUT_ROOT_ENV})")
        p.add_argument("--run-id", help="run directory name (default: command, timestamp and seed)")
        if name == "evaluate":
            p.add_argument("runs", nargs="*", help="run directories to aggregate")
            continue
        p.add_argument("--config", help="key = value file with defaults for this command")
        for opt, (kind, default, help_text) in options.items():
            shown = "" if default is None else f" (default: {default})"
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=kind, default=None,
                           help=help_text + shown)
    return parser


COMMANDS = {"train": cmd_train, "invert": cmd_invert, "counterfactual": cmd_counterfactual}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "evaluate":
        run_dir = reserve_run_dir(args, None)
        return cmd_evaluate(args.runs, run_dir)
    options = COMMAND_OPTIONS[args.command]
    file_values = read_config_file(args.config, options) if args.config else {}
    flags = {k: getattr(args, k) for k in options}
    cfg = merge_config(options, file_values, flags)
    if args.command != "train" and cfg["checkpoint"] is None:
        raise InputError("--checkpoint is required")
    run_dir = reserve_run_dir(args, cfg.get("seed"))
    return COMMANDS[args.command](cfg, run_dir)


def main(argv=None) -> int:
    try:
        return run(argv)
    except (InputError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
