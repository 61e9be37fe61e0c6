"""
Trial files, task relabelling and the synthetic generator
"""
import json

import numpy as np
import pytest

from app.core.exceptions import EmptySelectionError, FormatError, ShapeError
from app.models.presets import NUM_EXEMPLARS
from app.services.data_service import (
    TrialSet,
    apply_task,
    dataset_summary,
    load_meshes,
    load_trials,
    read_array,
    save_meshes,
    save_trials,
    synth_generate,
    task_selection,
    write_array,
)


def test_trial_file_round_trip(tmp_path, small_trials):
    path = save_trials(small_trials, tmp_path / "trials.eegt")
    loaded = load_trials(path)
    np.testing.assert_array_equal(loaded.trials, small_trials.trials)
    np.testing.assert_array_equal(loaded.exemplar_labels, small_trials.exemplar_labels)
    np.testing.assert_array_equal(loaded.category_labels, small_trials.category_labels)
    np.testing.assert_array_equal(loaded.subject_ids, small_trials.subject_ids)
    assert loaded.sample_rate == small_trials.sample_rate


def test_sidecar_may_carry_extra_keys(tmp_path, small_trials):
    path = save_trials(small_trials, tmp_path / "trials.eegt")
    sidecar = tmp_path / "trials.eegt.labels.json"
    labels = json.loads(sidecar.read_text())
    labels["recording"] = "session-2"
    sidecar.write_text(json.dumps(labels))
    assert len(load_trials(path)) == len(small_trials)


def test_bad_magic_and_truncation(tmp_path):
    path = write_array(np.zeros((2, 3, 4), dtype=np.float32), tmp_path / "a.eegt")
    blob = path.read_bytes()

    (tmp_path / "magic.eegt").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        read_array(tmp_path / "magic.eegt")

    (tmp_path / "short.eegt").write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        read_array(tmp_path / "short.eegt")

    (tmp_path / "header.eegt").write_bytes(blob[:12])
    with pytest.raises(FormatError):
        read_array(tmp_path / "header.eegt")


def test_missing_or_malformed_sidecar(tmp_path, small_trials):
    path = write_array(small_trials.trials, tmp_path / "bare.eegt")
    with pytest.raises(FormatError):
        load_trials(path)
    (tmp_path / "bare.eegt.labels.json").write_text('{"category": []}')
    with pytest.raises(FormatError):
        load_trials(path)


def test_label_counts_must_match(small_trials):
    with pytest.raises(FormatError):
        TrialSet(
            trials=small_trials.trials,
            category_labels=small_trials.category_labels[:-1],
            exemplar_labels=small_trials.exemplar_labels,
            subject_ids=small_trials.subject_ids,
        )
    with pytest.raises(ShapeError):
        TrialSet(trials=np.zeros((2, 3)), category_labels=[0, 0], exemplar_labels=[0, 1], subject_ids=[0, 0])
    with pytest.raises(ValueError):
        TrialSet(trials=np.zeros((1, 2, 2)), category_labels=[1], exemplar_labels=[0], subject_ids=[0])


def test_mesh_dump_round_trip(tmp_path, small_trials, small_meshes):
    path = save_meshes(small_meshes, small_trials, tmp_path / "meshes.eegt")
    loaded = load_meshes(path)
    assert loaded.shape == small_meshes.shape
    np.testing.assert_allclose(loaded, small_meshes.astype(np.float32))
    sidecar = json.loads((tmp_path / "meshes.eegt.labels.json").read_text())
    assert sidecar["mesh_shape"] == [12, 12]


# ============================================
# Tasks
# ============================================

def test_six_category_task_keeps_everything(small_trials):
    selected = apply_task(small_trials, "6cat")
    assert len(selected) == len(small_trials)
    np.testing.assert_array_equal(selected.targets, small_trials.category_labels)
    assert selected.task == "6cat"


def test_exemplar_task_labels(small_trials):
    selected = apply_task(small_trials, "72ex")
    np.testing.assert_array_equal(selected.targets, small_trials.exemplar_labels)
    assert set(selected.targets.tolist()) == set(range(NUM_EXEMPLARS))


def test_binary_task_keeps_two_of_six_categories(small_trials):
    selected = apply_task(small_trials, "hf-io")
    assert len(selected) == len(small_trials) * 2 // 6
    assert set(np.unique(selected.category_labels).tolist()) == {1, 5}
    np.testing.assert_array_equal(selected.targets, (selected.category_labels == 5).astype(int))


@pytest.mark.parametrize("task, category", [("hf", 1), ("io", 5)])
def test_within_category_tasks(small_trials, task, category):
    selected = apply_task(small_trials, task)
    assert np.all(selected.category_labels == category)
    assert sorted(set(selected.targets.tolist())) == list(range(12))
    np.testing.assert_array_equal(selected.targets, selected.exemplar_labels - 12 * category)


def test_task_leaves_trial_values_unchanged(small_trials):
    index, _ = task_selection(small_trials, "io")
    selected = apply_task(small_trials, "io")
    np.testing.assert_array_equal(selected.trials, small_trials.trials[index])


def test_empty_selection_raises(small_trials):
    only_faces = small_trials.subset(np.flatnonzero(small_trials.category_labels == 1))
    with pytest.raises(EmptySelectionError):
        apply_task(only_faces, "io")


def test_unknown_task_rejected(small_trials):
    with pytest.raises(ValueError):
        apply_task(small_trials, "7cat")


# ============================================
# Synthetic generator
# ============================================

def test_synth_layout(small_montage):
    trials = synth_generate(small_montage, n_per_exemplar=3, snr=2.0, seed=1, n_subjects=2, time_frames=10)
    assert trials.trials.shape == (2 * 72 * 3, 32, 10)
    assert np.bincount(trials.exemplar_labels).tolist() == [6] * 72
    assert np.bincount(trials.subject_ids).tolist() == [216, 216]
    np.testing.assert_array_equal(trials.category_labels, trials.exemplar_labels // 12)


def test_synth_is_deterministic(small_montage):
    a = synth_generate(small_montage, n_per_exemplar=1, snr=1.0, seed=3, time_frames=8)
    b = synth_generate(small_montage, n_per_exemplar=1, snr=1.0, seed=3, time_frames=8)
    c = synth_generate(small_montage, n_per_exemplar=1, snr=1.0, seed=4, time_frames=8)
    np.testing.assert_array_equal(a.trials, b.trials)
    assert not np.array_equal(a.trials, c.trials)


def test_noiseless_trials_repeat_per_exemplar(small_montage):
    clean = synth_generate(small_montage, n_per_exemplar=2, snr=float("inf"), seed=5, time_frames=16)
    first = clean.trials[clean.exemplar_labels == 10]
    np.testing.assert_array_equal(first[0], first[1])
    power = np.mean(clean.trials.astype(np.float64) ** 2, axis=(1, 2))
    np.testing.assert_allclose(power, 25.0, rtol=1e-4)


def test_measured_snr_matches_request(small_montage):
    clean = synth_generate(small_montage, n_per_exemplar=4, snr=float("inf"), seed=9, time_frames=32)
    noisy = synth_generate(small_montage, n_per_exemplar=4, snr=3.0, seed=9, time_frames=32)
    noise = noisy.trials.astype(np.float64) - clean.trials
    measured = np.mean(clean.trials.astype(np.float64) ** 2) / np.mean(noise ** 2)
    assert measured == pytest.approx(3.0, rel=0.1)


def test_synth_rejects_bad_arguments(small_montage):
    with pytest.raises(ValueError):
        synth_generate(small_montage, n_per_exemplar=1, snr=0.0, seed=0)
    with pytest.raises(ValueError):
        synth_generate(small_montage, n_per_exemplar=0, snr=1.0, seed=0)


def test_dataset_summary(small_trials):
    summary = dataset_summary(small_trials)
    assert summary.trials == 144
    assert summary.channels == 32
    assert summary.time_frames == 8
    assert summary.categories == {name: 24 for name in ("HB", "HF", "AB", "AF", "FV", "IO")}
    assert summary.subjects == {0: 144}
    assert set(summary.exemplars.values()) == {2}
