"""
Accuracy and CKA tables
"""
import json

import pandas as pd
import pytest

from app.services.report_service import accuracy_table, build_report, cka_table


@pytest.fixture
def results_frame():
    return pd.DataFrame(
        [
            ("6cat", "slim", 0, 0, 0.50),
            ("6cat", "slim", 0, 1, 0.70),
            ("6cat", "slim", 1, 0, 0.90),
            ("6cat", "wide", 0, 0, 0.80),
            ("hf", "slim", 0, 0, 0.25),
            ("hf", "slim", 0, 1, 0.35),
        ],
        columns=["task", "variant", "subject", "fold", "accuracy"],
    )


@pytest.fixture
def cka_frame():
    rows = []
    for variant, ct, values in (("fit", 1, (0.2, 0.4)), ("slim", 1, (0.6, 0.8)), ("slim", 2, (0.1, 0.3))):
        for i, value in enumerate(values):
            rows.append(("72ex", variant, 0, i, ct, 0, 1, value))
    return pd.DataFrame(rows, columns=["task", "variant", "subject", "fold", "ct_index", "head_i", "head_j", "cka"])


def test_accuracy_table_cells(results_frame):
    table = accuracy_table(results_frame)
    assert list(table.index) == ["6cat", "hf"]
    assert list(table.columns) == ["slim", "wide"]
    # subject means 0.6 and 0.9
    assert table.loc["6cat", "slim"] == "75.00 ± 21.21"
    assert table.loc["6cat", "wide"] == "80.00"
    # single subject falls back to the fold spread
    assert table.loc["hf", "slim"] == "30.00 ± 7.07"
    assert pd.isna(table.loc["hf", "wide"])


def test_cka_table_columns(cka_frame):
    table = cka_table(cka_frame)
    assert list(table.columns) == ["slim_ct1", "slim_ct2", "fit_ct1"]
    assert table.loc["72ex", "slim_ct1"] == pytest.approx(0.7)
    assert table.loc["72ex", "fit_ct1"] == pytest.approx(0.3)


def test_build_report_writes_tables(tmp_path, results_frame, cka_frame):
    results_frame.to_csv(tmp_path / "results.csv", index=False)
    cka_frame.to_csv(tmp_path / "cka_samples.csv", index=False)
    written = build_report([tmp_path / "results.csv"], [tmp_path / "cka_samples.csv"], tmp_path / "report")
    assert set(written) == {"accuracy", "cka", "json"}
    payload = json.loads(written["json"].read_text())
    assert payload["accuracy"]["6cat"]["slim"] == "75.00 ± 21.21"
    assert payload["cka_samples"] == {"72ex/fit/ct1": 2, "72ex/slim/ct1": 2, "72ex/slim/ct2": 2}
    assert pd.read_csv(written["cka"], index_col=0).shape == (1, 3)


def test_build_report_needs_inputs(tmp_path):
    with pytest.raises(ValueError):
        build_report([], [], tmp_path)
    pd.DataFrame({"task": ["6cat"]}).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(ValueError):
        build_report([tmp_path / "bad.csv"], [], tmp_path)
