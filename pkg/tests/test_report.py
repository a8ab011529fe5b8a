"""Experiment report table and serialization tests."""

import pytest

from alacarte.report import ExperimentReport


def sample_report():
    rep = ExperimentReport("demo", {"epochs": 2}, setting_name="n_shards")
    rep.add(0, 2, "apt", 0.9, wall_ms=12.5, flops=100.0)
    rep.add(1, 2, "apt", 0.8, wall_ms=11.0, flops=100.0)
    rep.add(0, 2, "majority", 0.7, wall_ms=9.0, flops=100.0)
    rep.add(0, 4, "apt", 0.6, wall_ms=20.0, flops=200.0)
    return rep


def test_accuracy_queries():
    rep = sample_report()
    assert rep.mean_accuracy("apt", 2) == pytest.approx(0.85)
    assert rep.mean_accuracy("apt") == pytest.approx((0.9 + 0.8 + 0.6) / 3)
    assert rep.accuracies("majority", 4).size == 0
    with pytest.raises(KeyError):
        rep.mean_accuracy("nope")
    assert rep.settings() == [2, 4]
    assert rep.methods() == ["apt", "majority"]


def test_aggregates_recomputed_from_rows():
    rep = sample_report()
    ag = {(a["setting"], a["method"]): a for a in rep.aggregates()}
    assert ag[(2, "apt")]["n"] == 2
    assert ag[(2, "apt")]["mean_accuracy"] == pytest.approx(0.85)
    assert ag[(2, "apt")]["std_accuracy"] == pytest.approx(0.05)
    assert ag[(4, "apt")]["n"] == 1
    assert (2, "majority") in ag
    assert (4, "majority") not in ag


def test_full_csv_has_timings_canonical_does_not():
    rep = sample_report()
    full = rep.to_csv()
    canon = rep.canonical_csv()
    assert full.splitlines()[0] == "seed,n_shards,method,accuracy,wall_ms,flops"
    assert canon.splitlines()[0] == "seed,n_shards,method,accuracy,flops"
    assert "12.5" in full
    assert "12.5" not in canon
    assert len(full.splitlines()) == len(canon.splitlines()) == 5


def test_canonical_csv_ignores_wall_clock():
    a = sample_report()
    b = sample_report()
    for row in b.rows:
        row.wall_ms = row.wall_ms * 7 + 3
    assert a.to_csv() != b.to_csv()
    assert a.canonical_csv() == b.canonical_csv()


def test_summary_mentions_config_and_rows():
    text = sample_report().summary()
    assert "scenario: demo" in text
    assert "epochs: 2" in text
    assert "rows: 4" in text
    assert "apt" in text and "majority" in text


def test_save_writes_three_files(tmp_path):
    rep = sample_report()
    rep.save(tmp_path, stem="demo")
    assert (tmp_path / "demo.csv").read_text() == rep.to_csv()
    assert (tmp_path / "demo_aggregates.csv").read_text() == rep.aggregates_csv()
    assert (tmp_path / "demo_summary.txt").read_text() == rep.summary()
    header = (tmp_path / "demo_aggregates.csv").read_text().splitlines()[0]
    assert header == "n_shards,method,n,mean_accuracy,std_accuracy"
