# tests/test_acceptance.py
#
# End-to-end comparisons. The synthetic check takes minutes on one core; the
# real-corpus check takes hours and only runs when STOTRANS_IMDB_DIR points
# at a directory holding train.tsv and test.tsv.

import os
from pathlib import Path

import pytest

from stotrans.services.experiment_service import RunConfig, build_splits, compare

IMDB_DIR = os.environ.get("STOTRANS_IMDB_DIR")


@pytest.mark.slow
def test_synthetic_in_and_out_of_domain_separation():
    cfg = RunConfig.load(overrides={"preset": "synthetic", "methods": "trans, sto, h-sto", "seed": "0"})
    rows, _ = compare(cfg, build_splits(cfg))
    by_key = {row.key: row for row in rows}

    for row in rows:
        assert row.id_report.mean >= 0.95, row.method
    assert by_key["trans"].id_report.std == 0.0
    assert by_key["trans"].ood_report.std == 0.0
    for key in ("sto", "h-sto"):
        diagnostics = by_key[key].diagnostics
        assert diagnostics["ood_mean_example_std"] > diagnostics["id_mean_example_std"], key


@pytest.mark.long
@pytest.mark.skipif(not IMDB_DIR, reason="STOTRANS_IMDB_DIR is not set")
def test_imdb_headline_accuracy():
    data = Path(IMDB_DIR)
    cfg = RunConfig.load(overrides={
        "preset": "sentiment",
        "train_path": str(data / "train.tsv"),
        "test_path": str(data / "test.tsv"),
        "methods": "trans, h-sto",
        "tau1": "1",
        "tau2": "20",
    })
    rows, _ = compare(cfg, build_splits(cfg))
    by_key = {row.key: row for row in rows}
    assert abs(by_key["trans"].id_report.mean - 0.8700) <= 0.02
    assert abs(by_key["h-sto"].id_report.mean - 0.8763) <= 0.02
