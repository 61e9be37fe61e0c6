"""
EEG-ConvTransformer - Command line
Run with: eegct <subcommand> [flags]   (or python -m app)
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from app.config import get_settings
from app.core.exceptions import ConvTransformerError
from app.models.presets import TASK_IDS, VARIANT_SIZES
from app.models.schemas import CliConfig, TaskSpec, TrainConfig, VariantConfig
from app.services.convtransformer_service import architecture_summary
from app.services.data_service import (
    TrialSet,
    dataset_summary,
    load_meshes,
    load_trials,
    save_meshes,
    save_trials,
    synth_generate,
    task_selection,
)
from app.services.diversity_service import DEFAULT_SUBSAMPLE_CAP, export_samples, summarize
from app.services.montage_service import load_montage_csv, project_trials, save_montage_csv, standard_montage
from app.services.report_service import build_report
from app.services.training_service import evaluate, head_sweep, load_model, resolve_variant, train_task

logger = logging.getLogger(__name__)


# ============================================
# PARSER
# ============================================

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default: $CT_SEED or 0)")
    parser.add_argument("--out-dir", default=None, help="Output directory (default: $CT_OUT_DIR or runs)")
    parser.add_argument("--precision", choices=["32", "64"], default=None, help="Floating point width")


def _inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trials", help="EEGT trial file (projected on the fly)")
    parser.add_argument("--meshes", help="EEGT mesh dump written by `project`")
    parser.add_argument("--montage", help="Montage CSV (label,x,y,z); default: 124-channel standard cap")
    parser.add_argument("--grid", type=int, default=None, help="Grid nodes per side before the border crop")


def _model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", choices=sorted(VARIANT_SIZES), default="slim")
    parser.add_argument("--task", choices=TASK_IDS, default="6cat")


def _training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None, help="Default: per-task table")
    parser.add_argument("--lr", type=float, default=None, help="Default: 1e-4")
    parser.add_argument("--batch", type=int, default=None, help="Default: 64")
    parser.add_argument("--weight-decay", type=float, default=None, help="Default: per-task table")
    parser.add_argument("--gamma", type=float, default=None, help="Default: per-task table")
    parser.add_argument("--folds", type=int, default=None, help="Default: 10")
    parser.add_argument("--max-subjects", type=int, default=None)
    parser.add_argument("--max-folds", type=int, default=None)
    parser.add_argument("--decoupled-weight-decay", action="store_true")
    parser.add_argument("--shuffle-labels", action="store_true", help="Chance-level control run")
    parser.add_argument("--jobs", type=int, default=None, help="Folds trained in parallel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegct", description="EEG-ConvTransformer pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("project", help="Project trials onto activity meshes")
    _common(p)
    p.add_argument("--trials", required=True)
    p.add_argument("--montage")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--out", help="Mesh dump path (default: <out-dir>/meshes.eegt)")

    p = sub.add_parser("synth", help="Generate a synthetic trial set")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--montage")
    p.add_argument("--channels", type=int, default=124)
    p.add_argument("--time-frames", type=int, default=32)
    p.add_argument("--n-per-exemplar", type=int, default=12)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--snr", type=float, default=1.0, help="Signal-to-noise power ratio; inf for noiseless")
    p.add_argument("--summary", action="store_true", help="Print the dataset summary as JSON")

    p = sub.add_parser("train", help="Stratified k-fold training")
    _common(p)
    _inputs(p)
    _model(p)
    _training(p)
    p.add_argument("--cka", action="store_true", help="Also record inter-head CKA per fold")
    p.add_argument("--cap", type=int, default=None, help="CKA row subsample cap")

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    _common(p)
    _inputs(p)
    _model(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=64)

    p = sub.add_parser("cka", help="Train and measure inter-head CKA")
    _common(p)
    _inputs(p)
    _model(p)
    _training(p)
    p.add_argument("--cap", type=int, default=None, help="CKA row subsample cap")
    p.add_argument("--sweep-heads", help="Comma-separated head counts, e.g. 2,4,6")

    p = sub.add_parser("report", help="Aggregate results and CKA CSVs into tables")
    _common(p)
    p.add_argument("--results", nargs="*", default=[], help="results.csv files")
    p.add_argument("--cka", nargs="*", default=[], help="cka_samples.csv files")

    p = sub.add_parser("summary", help="Class balance and shapes of a trial file")
    _common(p)
    p.add_argument("--trials", required=True)

    p = sub.add_parser("arch", help="Per-module parameter counts of a variant")
    _common(p)
    _model(p)
    p.add_argument("--num-classes", type=int, default=None, help="Default: the task's class count")
    p.add_argument("--time-frames", type=int, default=32)

    return parser


def resolve(args: argparse.Namespace) -> CliConfig:
    """Fold environment fallbacks into the parsed flags."""
    settings = get_settings()
    options = {k: v for k, v in vars(args).items() if k not in ("subcommand", "seed", "out_dir", "precision")}
    return CliConfig(
        subcommand=args.subcommand,
        seed=args.seed if args.seed is not None else settings.seed,
        out_dir=str(args.out_dir if args.out_dir is not None else settings.out_dir),
        precision=args.precision or settings.precision,
        options=options,
    )


# ============================================
# HELPERS
# ============================================

def _montage(path: Optional[str], channels: int = 124):
    return load_montage_csv(path) if path else standard_montage(channels)


def _load_inputs(config: CliConfig) -> Tuple[TrialSet, np.ndarray]:
    """Trial labels plus N x 1 x M x M x T meshes from --meshes or --trials."""
    opts = config.options
    dtype = np.float64 if config.precision == "64" else np.float32
    if opts.get("meshes"):
        return load_trials(opts["meshes"]), load_meshes(opts["meshes"]).astype(dtype)
    if not opts.get("trials"):
        raise ValueError("either --trials or --meshes is required")
    trial_set = load_trials(opts["trials"])
    montage = _montage(opts.get("montage"), trial_set.channels)
    grid = opts.get("grid") or get_settings().grid_size
    return trial_set, project_trials(trial_set.trials, montage, grid, dtype=dtype)


def _train_config(config: CliConfig) -> TrainConfig:
    opts = config.options
    return TrainConfig.for_task(
        opts["task"],
        opts["variant"],
        seed=config.seed,
        epochs=opts.get("epochs"),
        lr=opts.get("lr"),
        batch_size=opts.get("batch"),
        weight_decay=opts.get("weight_decay"),
        gamma=opts.get("gamma"),
        folds=opts.get("folds"),
        max_subjects=opts.get("max_subjects"),
        max_folds=opts.get("max_folds"),
        decoupled_weight_decay=opts.get("decoupled_weight_decay") or None,
        shuffle_labels=opts.get("shuffle_labels") or None,
    )


def _run_dir(config: CliConfig) -> Path:
    opts = config.options
    return Path(config.out_dir) / f"{opts['task']}_{opts['variant']}"


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2))


# ============================================
# SUBCOMMANDS
# ============================================

def cmd_project(config: CliConfig) -> int:
    opts = config.options
    trial_set = load_trials(opts["trials"])
    montage = _montage(opts.get("montage"), trial_set.channels)
    grid = opts.get("grid") or get_settings().grid_size
    meshes = project_trials(trial_set.trials, montage, grid)
    out = Path(opts.get("out") or Path(config.out_dir) / "meshes.eegt")
    save_meshes(meshes, trial_set, out)
    print(out)
    return 0


def cmd_synth(config: CliConfig) -> int:
    opts = config.options
    montage = _montage(opts.get("montage"), opts["channels"])
    trial_set = synth_generate(
        montage,
        n_per_exemplar=opts["n_per_exemplar"],
        snr=opts["snr"],
        seed=config.seed,
        n_subjects=opts["subjects"],
        time_frames=opts["time_frames"],
    )
    out = save_trials(trial_set, opts["out"])
    if not opts.get("montage"):
        save_montage_csv(montage, out.with_name(out.name + ".montage.csv"))
    if opts.get("summary"):
        _print_json(dataset_summary(trial_set).model_dump())
    return 0


def cmd_train(config: CliConfig) -> int:
    opts = config.options
    trial_set, meshes = _load_inputs(config)
    cfg = _train_config(config)
    variant = VariantConfig.preset(opts["variant"], precision=config.precision)
    cap = (opts.get("cap") or get_settings().cka_subsample_cap) if opts.get("cka") else None
    jobs = opts.get("jobs") or get_settings().jobs
    result = train_task(trial_set, cfg, variant, meshes, out_dir=_run_dir(config), jobs=jobs, cka_cap=cap)
    _print_json(result.summary.model_dump())
    return 0


def cmd_eval(config: CliConfig) -> int:
    opts = config.options
    trial_set, meshes = _load_inputs(config)
    index, targets = task_selection(trial_set, opts["task"])
    inputs = meshes[index]
    variant = resolve_variant(VariantConfig.preset(opts["variant"], precision=config.precision), opts["task"], inputs)
    params = load_model(opts["checkpoint"], variant)
    _print_json(evaluate(params, inputs, targets, batch_size=opts["batch"]).model_dump())
    return 0


def cmd_cka(config: CliConfig) -> int:
    opts = config.options
    trial_set, meshes = _load_inputs(config)
    cfg = _train_config(config)
    variant = VariantConfig.preset(opts["variant"], precision=config.precision)
    cap = opts.get("cap") or get_settings().cka_subsample_cap or DEFAULT_SUBSAMPLE_CAP
    jobs = opts.get("jobs") or get_settings().jobs
    run_dir = _run_dir(config)
    if opts.get("sweep_heads"):
        heads = [int(h) for h in opts["sweep_heads"].split(",") if h.strip()]
        frame = head_sweep(trial_set, cfg, variant, heads, meshes, out_dir=run_dir, jobs=jobs, cka_cap=cap)
        _print_json(frame.to_dict(orient="records"))
        return 0
    result = train_task(trial_set, cfg, variant, meshes, out_dir=run_dir, jobs=jobs, cka_cap=cap)
    export_samples(result.cka, run_dir / "cka_samples.csv")
    summaries = [s.model_dump() for s in summarize(result.cka)]
    (run_dir / "cka_summary.json").write_text(json.dumps(summaries, indent=2))
    _print_json(summaries)
    return 0


def cmd_report(config: CliConfig) -> int:
    opts = config.options
    written = build_report(opts["results"], opts["cka"], config.out_dir)
    _print_json({k: str(v) for k, v in written.items()})
    return 0


def cmd_summary(config: CliConfig) -> int:
    _print_json(dataset_summary(load_trials(config.options["trials"])).model_dump())
    return 0


def cmd_arch(config: CliConfig) -> int:
    opts = config.options
    num_classes = opts.get("num_classes") or TaskSpec.from_id(opts["task"]).num_classes
    cfg = VariantConfig.preset(opts["variant"], num_classes=num_classes, time_frames=opts["time_frames"])
    _print_json(architecture_summary(cfg).model_dump())
    return 0


COMMANDS = {
    "project": cmd_project,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cka": cmd_cka,
    "report": cmd_report,
    "summary": cmd_summary,
    "arch": cmd_arch,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run the subcommand; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = resolve(args)
        return COMMANDS[config.subcommand](config)
    except (ConvTransformerError, ValueError, OSError, KeyError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"eegct {args.subcommand}: error: {e}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=get_settings().log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return dispatch(argv)
    except SystemExit as e:
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
