"""
Training Service - Adam optimisation, LR schedule and stratified cross-validation

Every (subject, fold) pair trains a freshly built network on the other folds
and is scored on its held-out fold in eval mode. Folds are independent and can
run in worker processes; each derives its own seeds from (seed, subject, fold).
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import StratifiedKFold

from app.core.checkpoint import load_checkpoint, save_checkpoint
from app.core.exceptions import EmptySelectionError, NonFiniteError, ShapeError
from app.core.functional import cross_entropy
from app.core.tensor import Tensor, backward
from app.models.schemas import (
    AccuracySummary,
    CkaSampleSet,
    EpochRecord,
    EvaluationResult,
    FoldResult,
    TaskSpec,
    TrainConfig,
    VariantConfig,
)
from app.services.convtransformer_service import (
    CT_MODULES,
    ModelParameters,
    build_variant,
    model_forward,
    predict,
    sweep_variants,
)
from app.services.data_service import TrialSet, task_selection
from app.services.diversity_service import export_samples, pairwise_head_cka, summarize

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BatchHook = Callable[[int, int, np.ndarray], None]


# ============================================
# OPTIMISER
# ============================================

@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Dict[str, Tensor],
    grads: Optional[Dict[str, np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> AdamState:
    """
    One bias-corrected Adam update, in place.

    ``grads`` defaults to each tensor's ``.grad`` (missing gradients count as
    zero). Weight decay is added to the gradient unless ``decoupled``, in which
    case it shrinks the weights directly by ``lr * weight_decay``.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, param in params.items():
        g = grads[name] if grads is not None else param.grad
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if weight_decay and not decoupled:
            g = g + weight_decay * param.data
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if weight_decay and decoupled:
            update = update + lr * weight_decay * param.data
        param.data -= update.astype(param.dtype, copy=False)
    return state


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr * gamma^k with k the milestones (start, start+step, ...) reached by ``epoch``."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    if epoch < cfg.milestone_start:
        return cfg.lr
    k = (epoch - cfg.milestone_start) // cfg.milestone_step + 1
    return cfg.lr * cfg.gamma ** k


# ============================================
# FOLDS AND BATCHES
# ============================================

def _round_robin_folds(labels: np.ndarray, k: int, seed: int) -> List[np.ndarray]:
    """Shuffle each class and deal its members over the folds, continuing where the previous class stopped."""
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    position = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        assignment[members] = (position + np.arange(len(members))) % k
        position += len(members)
    return [np.flatnonzero(assignment == fold) for fold in range(k)]


def stratified_kfold(labels: Sequence[int], k: int = 10, seed: int = 0) -> List[np.ndarray]:
    """
    k disjoint index folds with per-class counts differing by at most one.

    Classes smaller than k are spread over as many folds as they have members.
    When every class is smaller than k scikit-learn refuses to split, and the
    members are dealt round-robin instead.
    """
    if k < 2:
        raise ValueError(f"k-fold needs k >= 2, got {k}")
    labels = np.asarray(labels)
    if len(labels) < k:
        raise EmptySelectionError(f"{len(labels)} samples cannot fill {k} folds")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        logger.warning(f"classes {classes[counts < k].tolist()} have fewer than {k} samples; some folds lack them")
    if counts.max() < k:
        return _round_robin_folds(labels, k, seed)
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [np.sort(test) for _, test in splitter.split(np.zeros(len(labels)), labels)]


def make_batches(indices: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Consecutive batches; a trailing batch of one sample joins the previous batch."""
    batches = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def fold_seed(seed: int, subject: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, subject, fold]).generate_state(1)[0])


# ============================================
# EVALUATION
# ============================================

def evaluate_predictions(predictions: np.ndarray, targets: np.ndarray, num_classes: int) -> EvaluationResult:
    """Accuracy and row-normalised confusion matrix (rows are true classes)."""
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise EmptySelectionError("cannot evaluate an empty dataset")
    counts = confusion_matrix(targets, predictions, labels=np.arange(num_classes)).astype(np.float64)
    totals = counts.sum(axis=1)
    rows = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=totals[:, None] > 0)
    return EvaluationResult(
        accuracy=float(np.trace(counts) / len(targets)),
        confusion=rows.tolist(),
        class_counts=totals.astype(int).tolist(),
    )


def evaluate(
    params: ModelParameters,
    inputs: np.ndarray,
    targets: np.ndarray,
    batch_size: int = 64,
) -> EvaluationResult:
    """Eval-mode accuracy; argmax ties go to the lowest class index."""
    if len(inputs) == 0:
        raise EmptySelectionError("cannot evaluate an empty dataset")
    logits = predict(params, inputs, batch_size=batch_size)
    return evaluate_predictions(np.argmax(logits, axis=1), targets, params.config.num_classes)


# ============================================
# TRAINING
# ============================================

@dataclass
class FoldOutcome:
    params: ModelParameters
    history: List[EpochRecord]
    evaluation: EvaluationResult


def train_fold(
    inputs: np.ndarray,
    targets: np.ndarray,
    train_index: np.ndarray,
    val_index: np.ndarray,
    cfg: TrainConfig,
    variant: VariantConfig,
    subject: int = 0,
    fold: int = 0,
    on_batch: Optional[BatchHook] = None,
) -> FoldOutcome:
    """Train a fresh network on ``train_index`` and score it on ``val_index``."""
    seed = fold_seed(cfg.seed, subject, fold)
    params = build_variant(variant, rng_seed=seed)
    trainable = params.trainable()
    state = AdamState.create(trainable)
    rng = np.random.default_rng(seed)
    history: List[EpochRecord] = []

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        losses, correct = [], 0
        for batch in make_batches(rng.permutation(train_index), cfg.batch_size):
            if on_batch is not None:
                on_batch(subject, fold, batch)
            logits = model_forward(inputs[batch], params, mode="train")
            loss = cross_entropy(logits, targets[batch])
            params.zero_grad()
            backward(loss)
            adam_step(trainable, None, state, lr, cfg.weight_decay, cfg.decoupled_weight_decay)
            losses.append(loss.item() * len(batch))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == targets[batch]))

        val = evaluate(params, inputs[val_index], targets[val_index], cfg.batch_size)
        record = EpochRecord(
            subject=subject,
            fold=fold,
            epoch=epoch,
            lr=lr,
            train_loss=float(np.sum(losses) / len(train_index)),
            train_acc=correct / len(train_index),
            val_acc=val.accuracy,
        )
        history.append(record)
        logger.info(
            f"subject {subject} fold {fold} epoch {epoch}: "
            f"loss {record.train_loss:.4f} train {record.train_acc:.3f} val {record.val_acc:.3f}"
        )

    return FoldOutcome(params=params, history=history, evaluation=val)


@dataclass
class FoldJob:
    """
    Indices and settings for one (subject, fold).

    The mesh tensor itself is not part of the job: it is shared by every fold
    of a task and reaches worker processes once, through the pool initializer.
    """
    targets: np.ndarray
    train_index: np.ndarray
    val_index: np.ndarray
    cfg: TrainConfig
    variant: VariantConfig
    subject: int
    fold: int
    checkpoint: Optional[str] = None
    cka_cap: Optional[int] = None


@dataclass
class FoldPlan:
    """Task-wide inputs (selected and cast) plus one job per (subject, fold)."""
    inputs: np.ndarray
    jobs: List[FoldJob]
    variant: VariantConfig


@dataclass
class FoldReport:
    result: FoldResult
    history: List[EpochRecord]
    cka: List[CkaSampleSet] = field(default_factory=list)


def run_fold(job: FoldJob, inputs: np.ndarray, on_batch: Optional[BatchHook] = None) -> FoldReport:
    outcome = train_fold(
        inputs, job.targets, job.train_index, job.val_index, job.cfg, job.variant, job.subject, job.fold, on_batch
    )
    if job.checkpoint is not None:
        save_checkpoint(outcome.params.state_dict(), job.checkpoint)
    samples = []
    if job.cka_cap is not None and job.variant.heads >= 2:
        val_inputs = inputs[job.val_index]
        for ct in CT_MODULES:
            samples.append(pairwise_head_cka(
                outcome.params, val_inputs, ct, job.cka_cap,
                seed=fold_seed(job.cfg.seed, job.subject, job.fold),
                task=job.cfg.task, subject=job.subject, fold=job.fold,
            ))
    result = FoldResult(
        task=job.cfg.task,
        variant=job.variant.name,
        subject=job.subject,
        fold=job.fold,
        accuracy=outcome.evaluation.accuracy,
        checkpoint=job.checkpoint,
    )
    return FoldReport(result=result, history=outcome.history, cka=samples)


# Set once per worker process by the pool initializer.
_worker_inputs: Optional[np.ndarray] = None


def _install_worker_inputs(inputs: np.ndarray) -> None:
    global _worker_inputs
    _worker_inputs = inputs


def _run_fold_in_worker(job: FoldJob) -> FoldReport:
    return run_fold(job, _worker_inputs)


@dataclass
class TaskResult:
    folds: List[FoldResult] = field(default_factory=list)
    history: List[EpochRecord] = field(default_factory=list)
    cka: List[CkaSampleSet] = field(default_factory=list)
    summary: Optional[AccuracySummary] = None


def resolve_variant(variant: VariantConfig, task: str, meshes: np.ndarray) -> VariantConfig:
    """Align class count and geometry with the task and the mesh tensor."""
    if meshes.ndim != 5 or meshes.shape[1] != 1 or meshes.shape[2] != meshes.shape[3]:
        raise ShapeError(f"meshes must be N x 1 x M x M x T, got {meshes.shape}")
    num_classes = TaskSpec.from_id(task).num_classes
    updates = {"num_classes": num_classes, "mesh_size": meshes.shape[2], "time_frames": meshes.shape[4]}
    if all(getattr(variant, k) == v for k, v in updates.items()):
        return variant
    logger.info(f"Adjusting CT-{variant.name} to {updates}")
    return VariantConfig(**{**variant.model_dump(), **updates})


def plan_folds(
    trial_set: TrialSet,
    cfg: TrainConfig,
    variant: VariantConfig,
    meshes: np.ndarray,
    out_dir: Optional[Path] = None,
    cka_cap: Optional[int] = None,
) -> FoldPlan:
    """Task selection, per-subject stratified folds and one job per (subject, fold)."""
    if len(meshes) != len(trial_set):
        raise ShapeError(f"{len(meshes)} meshes for {len(trial_set)} trials")
    index, targets = task_selection(trial_set, cfg.task)
    inputs = meshes[index].astype(variant.dtype, copy=False)
    variant = resolve_variant(variant, cfg.task, inputs)
    subjects_all = trial_set.subject_ids[index]

    jobs: List[FoldJob] = []
    for subject in np.unique(subjects_all)[: cfg.max_subjects].tolist():
        rows = np.flatnonzero(subjects_all == subject)
        labels = targets[rows]
        if cfg.shuffle_labels:
            labels = np.random.default_rng([cfg.seed, subject]).permutation(labels)
        subject_targets = np.full(len(targets), -1, dtype=np.int64)
        subject_targets[rows] = labels
        folds = stratified_kfold(labels, cfg.folds, seed=cfg.seed + subject)
        for fold, held_out in enumerate(folds[: cfg.max_folds]):
            checkpoint = None
            if out_dir is not None:
                checkpoint = str(out_dir / "checkpoints" / f"{cfg.task}_{variant.name}_s{subject}_f{fold}.ctck")
            jobs.append(FoldJob(
                targets=subject_targets,
                train_index=rows[np.setdiff1d(np.arange(len(rows)), held_out)],
                val_index=rows[held_out],
                cfg=cfg,
                variant=variant,
                subject=subject,
                fold=fold,
                checkpoint=checkpoint,
                cka_cap=cka_cap,
            ))
    return FoldPlan(inputs=inputs, jobs=jobs, variant=variant)


def train_task(
    trial_set: TrialSet,
    cfg: TrainConfig,
    variant: VariantConfig,
    meshes: np.ndarray,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: int = 1,
    on_batch: Optional[BatchHook] = None,
    cka_cap: Optional[int] = None,
) -> TaskResult:
    """
    Stratified k-fold training per subject.

    ``meshes`` is aligned with ``trial_set`` (N x 1 x M x M x T); task
    selection and relabelling are applied here. With ``out_dir`` a JSON-lines
    run log, a results CSV and one CTCK checkpoint per fold are written. With
    ``cka_cap`` every fold also reports inter-head CKA on its held-out trials.
    With ``jobs > 1`` folds run in worker processes; results come back in
    job order, so files match a sequential run.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)
    plan = plan_folds(trial_set, cfg, variant, meshes, out_path, cka_cap)
    variant_name = plan.variant.name
    subjects = len({job.subject for job in plan.jobs})
    logger.info(f"Training {cfg.task} / CT-{variant_name}: {subjects} subjects, {len(plan.jobs)} folds")

    if jobs > 1 and on_batch is None:
        workers = min(jobs, len(plan.jobs))
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_install_worker_inputs, initargs=(plan.inputs,)
        ) as pool:
            reports = list(pool.map(_run_fold_in_worker, plan.jobs))
    else:
        reports = [run_fold(job, plan.inputs, on_batch) for job in plan.jobs]

    result = TaskResult()
    for report in reports:
        result.folds.append(report.result)
        result.history.extend(report.history)
        result.cka.extend(report.cka)
    result.summary = summarize_accuracies(result.folds)

    if out_path is not None:
        write_run_log(result.history, out_path / "train_log.jsonl")
        write_results(result.folds, out_path / "results.csv")
        (out_path / "summary.json").write_text(result.summary.model_dump_json(indent=2))
        if result.cka:
            export_samples(result.cka, out_path / "cka_samples.csv")
    logger.info(f"{cfg.task} / CT-{variant_name}: mean accuracy {result.summary.subject_mean:.4f}")
    return result


def head_sweep(
    trial_set: TrialSet,
    cfg: TrainConfig,
    base: VariantConfig,
    heads: Sequence[int],
    meshes: np.ndarray,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: int = 1,
    cka_cap: Optional[int] = None,
) -> pd.DataFrame:
    """Train one custom variant per head count; mean CKA per (heads, ct_index) plus accuracy."""
    rows = []
    for h, variant in zip(heads, sweep_variants(base, list(heads))):
        run_dir = Path(out_dir) / f"heads_{h}" if out_dir is not None else None
        result = train_task(trial_set, cfg, variant, meshes, run_dir, jobs, cka_cap=cka_cap)
        for summary in (summarize(result.cka) if result.cka else []):
            rows.append({"heads": h, "ct_index": summary.ct_index, "mean_cka": summary.mean_cka,
                         "accuracy": result.summary.subject_mean})
    frame = pd.DataFrame(rows, columns=["heads", "ct_index", "mean_cka", "accuracy"])
    if out_dir is not None:
        frame.to_csv(Path(out_dir) / "head_sweep.csv", index=False)
    return frame


# ============================================
# SUMMARIES AND FILES
# ============================================

def summarize_accuracies(folds: List[FoldResult]) -> AccuracySummary:
    """Fold statistics plus subject-wise means (per-subject fold mean first)."""
    if not folds:
        raise EmptySelectionError("no fold results to summarise")
    frame = pd.DataFrame([f.model_dump() for f in folds])
    per_subject = frame.groupby("subject")["accuracy"].mean()
    return AccuracySummary(
        task=str(frame["task"].iloc[0]),
        variant=str(frame["variant"].iloc[0]),
        fold_mean=float(frame["accuracy"].mean()),
        fold_std=float(frame["accuracy"].std(ddof=1)) if len(frame) > 1 else None,
        subject_means={int(k): float(v) for k, v in per_subject.items()},
        subject_mean=float(per_subject.mean()),
        subject_std=float(per_subject.std(ddof=1)) if len(per_subject) > 1 else None,
    )


def write_run_log(history: List[EpochRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w") as handle:
        for record in history:
            handle.write(json.dumps(record.model_dump()) + "\n")
    return path


def write_results(folds: List[FoldResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.DataFrame([f.model_dump() for f in folds], columns=["task", "variant", "subject", "fold", "accuracy"])
    frame.to_csv(path, index=False)
    return path


def read_results(path: Union[str, Path]) -> List[FoldResult]:
    frame = pd.read_csv(path)
    return [FoldResult(**row) for row in frame.to_dict(orient="records")]


def load_model(path: Union[str, Path], variant: VariantConfig) -> ModelParameters:
    """Rebuild ``variant`` and fill it from a CTCK checkpoint."""
    params = build_variant(variant, rng_seed=0)
    params.load_state_dict(load_checkpoint(path))
    return params
