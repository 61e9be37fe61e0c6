"""
Report Service - Accuracy and CKA tables aggregated from run outputs

Accuracy table: one row per task, one column per variant, "mean ± sd" of the
subject-wise accuracies. CKA table: mean inter-head CKA per task, variant and
CT module.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import pandas as pd

from app.models.presets import TASK_IDS, VARIANT_SIZES
from app.models.schemas import FoldResult
from app.services.diversity_service import SAMPLE_COLUMNS
from app.services.training_service import summarize_accuracies

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["task", "variant", "subject", "fold", "accuracy"]
VARIANT_ORDER = list(VARIANT_SIZES) + ["custom"]


def _read_all(paths: Sequence[Union[str, Path]], columns: List[str]) -> pd.DataFrame:
    frames = []
    for path in paths:
        frame = pd.read_csv(path)
        missing = set(columns) - set(frame.columns)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        frames.append(frame[columns])
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)


def _ordered(frame: pd.DataFrame) -> pd.DataFrame:
    rows = [t for t in TASK_IDS if t in frame.index] + [t for t in frame.index if t not in TASK_IDS]
    cols = [v for v in VARIANT_ORDER if v in frame.columns] + [v for v in frame.columns if v not in VARIANT_ORDER]
    return frame.loc[rows, cols]


def accuracy_table(results: pd.DataFrame) -> pd.DataFrame:
    """Task x variant grid of subject-wise mean ± sample SD (percent)."""
    cells: Dict[tuple, str] = {}
    for (task, variant), group in results.groupby(["task", "variant"], sort=False):
        folds = [FoldResult(**row) for row in group.to_dict(orient="records")]
        summary = summarize_accuracies(folds)
        spread = summary.subject_std if summary.subject_std is not None else summary.fold_std
        cell = f"{100 * summary.subject_mean:.2f}"
        if spread is not None:
            cell += f" ± {100 * spread:.2f}"
        cells[(task, variant)] = cell
    if not cells:
        return pd.DataFrame()
    table = pd.Series(cells).unstack()
    table.index.name, table.columns.name = "task", "variant"
    return _ordered(table)


def cka_table(samples: pd.DataFrame) -> pd.DataFrame:
    """Mean CKA per task (rows) and (variant, ct_index) columns."""
    if samples.empty:
        return pd.DataFrame()
    means = samples.groupby(["task", "variant", "ct_index"])["cka"].mean().unstack(["variant", "ct_index"])
    order = sorted(means.columns, key=lambda c: (VARIANT_ORDER.index(c[0]) if c[0] in VARIANT_ORDER else 99, c[1]))
    means = means[order]
    means.columns = [f"{variant}_ct{ct}" for variant, ct in means.columns]
    rows = [t for t in TASK_IDS if t in means.index] + [t for t in means.index if t not in TASK_IDS]
    return means.loc[rows].round(4)


def build_report(
    result_paths: Sequence[Union[str, Path]],
    cka_paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
) -> Dict[str, Path]:
    """Write accuracy_table.csv, cka_table.csv and report.json under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = _read_all(result_paths, RESULT_COLUMNS)
    samples = _read_all(cka_paths, SAMPLE_COLUMNS)
    if results.empty and samples.empty:
        raise ValueError("report needs at least one results CSV or CKA CSV")

    written: Dict[str, Path] = {}
    payload: Dict[str, object] = {}
    if not results.empty:
        table = accuracy_table(results)
        written["accuracy"] = out_dir / "accuracy_table.csv"
        table.to_csv(written["accuracy"])
        payload["accuracy"] = json.loads(table.to_json(orient="index"))
    if not samples.empty:
        table = cka_table(samples)
        written["cka"] = out_dir / "cka_table.csv"
        table.to_csv(written["cka"])
        payload["cka"] = json.loads(table.to_json(orient="index"))
        payload["cka_samples"] = {
            f"{task}/{variant}/ct{ct}": int(n)
            for (task, variant, ct), n in samples.groupby(["task", "variant", "ct_index"]).size().items()
        }
    written["json"] = out_dir / "report.json"
    written["json"].write_text(json.dumps(payload, indent=2, ensure_ascii=False))
    logger.info(f"Report written to {out_dir}")
    return written
