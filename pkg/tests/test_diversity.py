"""
Inter-head diversity: unbiased linear CKA and its per-module aggregation
"""
import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import DegenerateRepresentationError, NonFiniteError, ShapeError
from app.models.schemas import CkaPair, CkaSampleSet
from app.services.convtransformer_service import build_variant
from app.services.diversity_service import (
    SAMPLE_COLUMNS,
    export_samples,
    flatten_head,
    pairwise_head_cka,
    samples_frame,
    subsample_rows,
    summarize,
    unbiased_hsic,
    unbiased_linear_cka,
)
from tests.conftest import mini_variant


def gram_cka(A, B):
    K, L = A @ A.T, B @ B.T
    return unbiased_hsic(K, L) / np.sqrt(unbiased_hsic(K, K) * unbiased_hsic(L, L))


def hsic_loops(K, L):
    """Direct sum form of the unbiased estimator."""
    n = len(K)
    Kt, Lt = K.copy(), L.copy()
    np.fill_diagonal(Kt, 0)
    np.fill_diagonal(Lt, 0)
    total = sum(Kt[i, j] * Lt[i, j] for i in range(n) for j in range(n))
    total += Kt.sum() * Lt.sum() / ((n - 1) * (n - 2))
    total -= 2.0 / (n - 2) * sum(Kt[i, j] * Lt[j, q] for i in range(n) for j in range(n) for q in range(n))
    return total / (n * (n - 3))


def test_flatten_head_row_order(rng):
    rep = rng.normal(size=(2, 3, 4, 5))
    flat = flatten_head(rep)
    assert flat.shape == (40, 3)
    np.testing.assert_array_equal(flat[1 * 20 + 2 * 5 + 3], rep[1, :, 2, 3])
    with pytest.raises(ShapeError):
        flatten_head(rep[0])


def test_hsic_matches_direct_sums(rng):
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    K, L = A @ A.T, B @ B.T
    assert unbiased_hsic(K, L) == pytest.approx(hsic_loops(K, L), abs=1e-10)


def test_feature_space_cka_matches_gram_form(rng):
    for n in (6, 40):
        A, B = rng.normal(size=(n, 3)), rng.normal(size=(n, 5)) + 0.3
        assert unbiased_linear_cka(A, B) == pytest.approx(gram_cka(A, B), abs=1e-10)


def test_self_similarity_is_one(rng):
    A = rng.normal(size=(50, 4))
    assert unbiased_linear_cka(A, A) == pytest.approx(1.0, abs=1e-12)


def test_invariances(rng):
    A, B = rng.normal(size=(60, 4)), rng.normal(size=(60, 3))
    B = B + 0.5 * A[:, :3]
    base = unbiased_linear_cka(A, B)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert unbiased_linear_cka(A @ Q, B) == pytest.approx(base, abs=1e-10)
    assert unbiased_linear_cka(7.5 * A, B) == pytest.approx(base, abs=1e-10)
    assert unbiased_linear_cka(A + 3.0, B - 1.0) == pytest.approx(base, abs=1e-10)


def test_symmetric(rng):
    A, B = rng.normal(size=(30, 2)), rng.normal(size=(30, 5))
    assert unbiased_linear_cka(A, B) == unbiased_linear_cka(B, A)


def test_independent_inputs_are_near_zero(rng):
    A, B = rng.normal(size=(4000, 4)), rng.normal(size=(4000, 4))
    assert abs(unbiased_linear_cka(A, B)) < 0.02


def test_degenerate_and_invalid_inputs(rng):
    A = rng.normal(size=(10, 3))
    with pytest.raises(DegenerateRepresentationError):
        unbiased_linear_cka(np.ones((10, 3)), A)
    with pytest.raises(DegenerateRepresentationError):
        unbiased_linear_cka(A[:3], A[:3])
    with pytest.raises(ShapeError):
        unbiased_linear_cka(A, A[:8])
    bad = A.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        unbiased_linear_cka(bad, A)


def test_subsample_rows(rng):
    assert subsample_rows(100, None) is None
    assert subsample_rows(100, 200) is None
    rows = subsample_rows(10_000, 4096, seed=3)
    assert len(rows) == 4096 and len(np.unique(rows)) == 4096
    assert np.all(np.diff(rows) > 0)
    np.testing.assert_array_equal(rows, subsample_rows(10_000, 4096, seed=3))


# ============================================
# Head pairs
# ============================================

@pytest.mark.parametrize("heads, pairs", [(4, 6), (8, 28), (12, 66)])
def test_pair_count_per_module(rng, heads, pairs):
    cfg = mini_variant(heads=heads, projections=1, local_features=heads)
    params = build_variant(cfg, rng_seed=heads)
    inputs = rng.normal(size=(2, 1, 12, 12, 8))
    sample_set = pairwise_head_cka(params, inputs, ct_index=1, subsample_cap=None, task="6cat", fold=3)
    assert len(sample_set.pairs) == pairs
    assert sample_set.heads == heads
    assert (sample_set.task, sample_set.fold_id, sample_set.ct_index) == ("6cat", 3, 1)
    assert [(p.head_i, p.head_j) for p in sample_set.pairs][:3] == [(0, 1), (0, 2), (0, 3)]
    assert all(-1.0 - 1e-9 <= p.cka <= 1.0 + 1e-9 for p in sample_set.pairs)


def test_identical_heads_have_unit_similarity(mini_cfg, rng):
    params = build_variant(mini_cfg, rng_seed=0)
    for role in ("query", "key", "value"):
        params.tensors[f"ct2.head1.{role}"].data[...] = params.tensors[f"ct2.head0.{role}"].data
    sample_set = pairwise_head_cka(params, rng.normal(size=(3, 1, 12, 12, 8)), ct_index=2)
    assert sample_set.pairs[0].cka == pytest.approx(1.0, abs=1e-10)


def test_subsampling_is_seeded(mini_cfg, rng):
    params = build_variant(mini_cfg, rng_seed=0)
    inputs = rng.normal(size=(4, 1, 12, 12, 8))
    a = pairwise_head_cka(params, inputs, 1, subsample_cap=100, seed=1)
    b = pairwise_head_cka(params, inputs, 1, subsample_cap=100, seed=1)
    assert a.pairs[0].cka == b.pairs[0].cka


def test_sample_set_checks_pair_count():
    with pytest.raises(ValueError):
        CkaSampleSet(ct_index=1, heads=3, pairs=[CkaPair(head_i=0, head_j=1, cka=0.2)])


# ============================================
# Aggregation and export
# ============================================

def make_sets():
    def one(ct, fold, values):
        pairs = [CkaPair(head_i=0, head_j=1, cka=values[0]), CkaPair(head_i=0, head_j=2, cka=values[1]),
                 CkaPair(head_i=1, head_j=2, cka=values[2])]
        return CkaSampleSet(task="hf", variant="slim", fold_id=fold, ct_index=ct, heads=3, pairs=pairs)

    return [one(1, 0, (0.1, 0.2, 0.3)), one(1, 1, (0.5, 0.5, 0.5)), one(2, 0, (0.9, 0.8, 0.7))]


def test_summarize_means_per_module():
    summaries = summarize(make_sets())
    assert [(s.ct_index, s.samples) for s in summaries] == [(1, 6), (2, 3)]
    assert summaries[0].mean_cka == pytest.approx(0.35)
    assert summaries[1].mean_cka == pytest.approx(0.8)
    with pytest.raises(ValueError):
        summarize([])


def test_export_samples(tmp_path):
    path = export_samples(make_sets(), tmp_path / "out" / "cka.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == SAMPLE_COLUMNS
    assert len(frame) == 9
    pd.testing.assert_frame_equal(frame, samples_frame(make_sets()), check_dtype=False)


def test_single_position_head_is_its_vector():
    rep = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(flatten_head(rep), [[1.0, 2.0, 3.0]])


def test_summarize_small_sets():
    single = CkaSampleSet(ct_index=1, heads=2, pairs=[CkaPair(head_i=0, head_j=1, cka=0.42)])
    assert summarize([single])[0].mean_cka == pytest.approx(0.42)
    low = CkaSampleSet(ct_index=2, heads=2, pairs=[CkaPair(head_i=0, head_j=1, cka=0.0)])
    high = CkaSampleSet(ct_index=2, heads=2, fold_id=1, pairs=[CkaPair(head_i=0, head_j=1, cka=1.0)])
    assert summarize([low, high])[0].mean_cka == pytest.approx(0.5)
