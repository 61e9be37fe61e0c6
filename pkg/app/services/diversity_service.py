"""
Diversity Service - Inter-head representational similarity (unbiased linear CKA)

Head outputs B x D x P x T are flattened to (B*P*T) x D and compared pairwise
with the unbiased HSIC estimator. The estimator centres internally, so raw
features go in; estimates can be slightly negative and are kept as is.
"""
import logging
from itertools import combinations
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.exceptions import DegenerateRepresentationError, NonFiniteError, ShapeError
from app.models.schemas import CkaPair, CkaSampleSet, CkaSummary
from app.services.convtransformer_service import ModelParameters, collect_head_representations

logger = logging.getLogger(__name__)

DEFAULT_SUBSAMPLE_CAP = 4096
MIN_ROWS = 4
SAMPLE_COLUMNS = ["task", "variant", "subject", "fold", "ct_index", "head_i", "head_j", "cka"]


def flatten_head(rep: np.ndarray) -> np.ndarray:
    """B x D x P x T -> (B*P*T) x D, rows ordered (sample, patch, time)."""
    if rep.ndim != 4:
        raise ShapeError(f"head representation must be B x D x P x T, got {rep.shape}")
    batch, d, patches, t = rep.shape
    return rep.transpose(0, 2, 3, 1).reshape(batch * patches * t, d)


def unbiased_hsic(K: np.ndarray, L: np.ndarray) -> float:
    """Unbiased HSIC of two n x n Gram matrices (diagonals are ignored)."""
    n = K.shape[0]
    if n < MIN_ROWS:
        raise DegenerateRepresentationError(f"unbiased HSIC needs at least {MIN_ROWS} samples, got {n}")
    K = K - np.diag(np.diag(K))
    L = L - np.diag(np.diag(L))
    ones = np.ones(n)
    term1 = np.sum(K * L)
    term2 = (ones @ K @ ones) * (ones @ L @ ones) / ((n - 1) * (n - 2))
    term3 = 2.0 / (n - 2) * (ones @ K @ L @ ones)
    return float((term1 + term2 - term3) / (n * (n - 3)))


def _linear_hsic_terms(A: np.ndarray, B: np.ndarray) -> float:
    """Unbiased HSIC of the linear kernels AA^T and BB^T, never forming an n x n matrix."""
    n = A.shape[0]
    a_sq = np.einsum("ij,ij->i", A, A)
    b_sq = np.einsum("ij,ij->i", B, B)
    trace_kl = np.sum((A.T @ B) ** 2) - np.dot(a_sq, b_sq)
    k_row = A @ A.sum(axis=0) - a_sq
    l_row = B @ B.sum(axis=0) - b_sq
    sum_k, sum_l = k_row.sum(), l_row.sum()
    return float((trace_kl + sum_k * sum_l / ((n - 1) * (n - 2)) - 2.0 / (n - 2) * np.dot(k_row, l_row)) / (n * (n - 3)))


def _noise_floor(A: np.ndarray) -> float:
    """Round-off level of a self-HSIC; constant features land below it."""
    return 1e-10 * float(np.mean(np.einsum("ij,ij->i", A, A))) ** 2


def unbiased_linear_cka(A: np.ndarray, B: np.ndarray) -> float:
    """
    HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L)) with K = AA^T, L = BB^T.

    Computed in feature space, O(n d^2); symmetric in its arguments.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ShapeError(f"CKA needs two matrices with equal row counts, got {A.shape} and {B.shape}")
    if A.shape[0] < MIN_ROWS:
        raise DegenerateRepresentationError(f"unbiased CKA needs at least {MIN_ROWS} rows, got {A.shape[0]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteError("CKA input contains NaN or Inf")
    hsic_kk = _linear_hsic_terms(A, A)
    hsic_ll = _linear_hsic_terms(B, B)
    if hsic_kk <= _noise_floor(A) or hsic_ll <= _noise_floor(B):
        raise DegenerateRepresentationError("degenerate representation: self-HSIC is not positive")
    hsic_kl = 0.5 * (_linear_hsic_terms(A, B) + _linear_hsic_terms(B, A))
    return hsic_kl / np.sqrt(hsic_kk * hsic_ll)


def subsample_rows(n: int, cap: Optional[int], seed: int = 0) -> Optional[np.ndarray]:
    """Sorted row subset of size ``cap`` (uniform, without replacement); None keeps all rows."""
    if cap is None or n <= cap:
        return None
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def head_matrices(
    params: ModelParameters,
    inputs: np.ndarray,
    ct_index: int,
    batch_size: int = 64,
) -> List[np.ndarray]:
    """Flattened per-head representations of ``inputs`` (eval mode)."""
    per_batch = [
        collect_head_representations(inputs[start:start + batch_size], params, ct_index)
        for start in range(0, len(inputs), batch_size)
    ]
    return [flatten_head(np.concatenate(heads, axis=0)) for heads in zip(*per_batch)]


def pairwise_head_cka(
    params: ModelParameters,
    inputs: np.ndarray,
    ct_index: int,
    subsample_cap: Optional[int] = DEFAULT_SUBSAMPLE_CAP,
    seed: int = 0,
    task: str = "",
    subject: int = 0,
    fold: int = 0,
) -> CkaSampleSet:
    """CKA for all H(H-1)/2 head pairs of one CT module on a validation set."""
    heads = head_matrices(params, inputs, ct_index)
    rows = subsample_rows(len(heads[0]), subsample_cap, seed)
    if rows is not None:
        heads = [h[rows] for h in heads]
    pairs = []
    for i, j in combinations(range(len(heads)), 2):
        pairs.append(CkaPair(head_i=i, head_j=j, cka=unbiased_linear_cka(heads[i], heads[j])))
    logger.debug(f"CT{ct_index}: {len(pairs)} head pairs over {len(heads[0])} rows")
    return CkaSampleSet(
        task=task,
        variant=params.config.name,
        subject_id=subject,
        fold_id=fold,
        ct_index=ct_index,
        heads=len(heads),
        pairs=pairs,
    )


# ============================================
# AGGREGATION AND EXPORT
# ============================================

def samples_frame(samples: Sequence[CkaSampleSet]) -> pd.DataFrame:
    records = [
        {
            "task": s.task,
            "variant": s.variant,
            "subject": s.subject_id,
            "fold": s.fold_id,
            "ct_index": s.ct_index,
            "head_i": p.head_i,
            "head_j": p.head_j,
            "cka": p.cka,
        }
        for s in samples
        for p in s.pairs
    ]
    return pd.DataFrame(records, columns=SAMPLE_COLUMNS)


def summarize(samples: Sequence[CkaSampleSet]) -> List[CkaSummary]:
    """Mean CKA per (task, variant, ct_index) over every fold and head pair."""
    frame = samples_frame(samples)
    if frame.empty:
        raise ValueError("no CKA samples to summarise")
    grouped = frame.groupby(["task", "variant", "ct_index"], sort=True)["cka"].agg(["mean", "count"])
    return [
        CkaSummary(task=task, variant=variant, ct_index=int(ct), mean_cka=float(row["mean"]), samples=int(row["count"]))
        for (task, variant, ct), row in grouped.iterrows()
    ]


def export_samples(samples: Sequence[CkaSampleSet], path: Union[str, Path]) -> Path:
    """Raw per-pair values for external density plots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples_frame(samples).to_csv(path, index=False)
    logger.info(f"Wrote {sum(len(s.pairs) for s in samples)} CKA samples to {path}")
    return path
