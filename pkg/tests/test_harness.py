"""Experiment protocol tests on a miniature backbone and corpus."""

import numpy as np
import pytest

from alacarte import backbone as B
from alacarte import data as D
from alacarte import harness as H
from alacarte import pool as PL
from alacarte import prompts as P
from alacarte import training as TR
from alacarte.errors import PoolError
from alacarte.report import ExperimentReport

TINY = B.BackboneConfig(image_size=16, patch_size=8, d_model=32, n_layers=2, n_heads=4)


@pytest.fixture(scope="module")
def params():
    return B.init_backbone(TINY, seed=0).freeze()


@pytest.fixture(scope="module")
def corpus():
    train = D.gen_synthetic(4, 1, 8, image_size=16, seed=21, split="train")
    test = D.gen_synthetic(4, 1, 4, image_size=16, seed=21, split="test")
    return train, test


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------

def test_fit_linear_r2_exact_line():
    slope, intercept, r2 = H.fit_linear_r2([1, 2, 3, 4], [3, 5, 7, 9])
    assert slope == pytest.approx(2.0)
    assert intercept == pytest.approx(1.0)
    assert r2 == pytest.approx(1.0)


def test_fit_linear_r2_constant_and_noise():
    _, _, r2 = H.fit_linear_r2([1, 2, 3], [5, 5, 5])
    assert r2 == 1.0
    _, _, r2n = H.fit_linear_r2([1, 2, 3, 4, 5], [1, 9, 2, 8, 3])
    assert r2n < 0.9


def test_paragon_gap_arithmetic():
    rep = ExperimentReport("shard_sweep", {}, setting_name="n_shards")
    rep.add(0, 1, "paragon", 0.9)
    rep.add(0, 2, "apt", 0.85)
    rep.add(0, 4, "apt", 0.80)
    rep.add(0, 16, "apt", 0.50)   # outside [2, 8], ignored
    assert H.paragon_gap(rep) == pytest.approx(((0.9 - 0.85) + (0.9 - 0.8)) / 2)
    with pytest.raises(PoolError):
        H.paragon_gap(rep, lo=5, hi=7)


def test_error_increase_relative_to_start():
    rep = ExperimentReport("forget_curve", {}, setting_name="n_remaining")
    rep.add(0, 3, "apt", 0.9)
    rep.add(0, 2, "apt", 0.8)
    rep.add(0, 1, "apt", 0.6)
    got = H.error_increase(rep)
    assert got[0] == (3, pytest.approx(0.0))
    assert got[1] == (2, pytest.approx(0.1))
    assert got[2] == (1, pytest.approx(0.3))


# ---------------------------------------------------------------------------
# shard sweep
# ---------------------------------------------------------------------------

def test_shard_sweep_structure_and_determinism(params, corpus):
    train, test = corpus
    kwargs = dict(shard_counts=(2,), seeds=(0,), epochs=2,
                  finetune_epochs=1, include_finetuned=True)
    rep = H.run_shard_sweep(TINY, params, train, test, workers=1, **kwargs)

    # n=1 is recorded as both the composed run and the paragon, equal by construction
    apt1 = rep.accuracies("apt", 1)
    par1 = rep.accuracies("paragon", 1)
    np.testing.assert_array_equal(apt1, par1)
    assert len(apt1) == 1

    methods_at_2 = {r.method for r in rep.rows if r.setting == 2}
    assert methods_at_2 == {"apt", "majority", "param_average",
                            "naive_concat", "finetuned_ensemble"}

    # reruns and worker counts change wall time only
    again = H.run_shard_sweep(TINY, params, train, test, workers=2, **kwargs)
    assert rep.canonical_csv() == again.canonical_csv()
    assert H.paragon_gap(rep, lo=2, hi=2) == pytest.approx(
        rep.mean_accuracy("paragon", 1) - rep.mean_accuracy("apt", 2))


# ---------------------------------------------------------------------------
# forgetting
# ---------------------------------------------------------------------------

def test_forget_curve_removes_blobs_and_leaves_no_residue(tmp_path, params, corpus):
    train, test = corpus
    pool = H.build_shard_pool(TINY, params, train, 3, tmp_path / "pool",
                              seed=0, epochs=1)
    assert len(pool) == 3
    blob_count = len(list((tmp_path / "pool").glob("*.blob")))
    assert blob_count == 3
    rep = H.run_forget_curve(TINY, params, pool, test, removal_seed=0, verify=True)
    # one evaluation at the start plus one per removal down to a single source
    assert [int(r.setting) for r in rep.rows] == [3, 2, 1]
    assert len(list((tmp_path / "pool").glob("*.blob"))) == 1
    steps = H.error_increase(rep)
    assert steps[0][1] == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# incremental scenarios
# ---------------------------------------------------------------------------

def test_cil_single_episode_is_plain_prompt_tuning(params, corpus):
    train, test = corpus
    rep = H.run_cil(TINY, params, train, test, n_episodes=1, seeds=(0,),
                    epochs=2, k_protos=2)
    # train the same prompt by hand: one episode covering every class,
    # source seed 0, and evaluate its raw argmax
    tc = TR.TrainConfig(regime="prompt", epochs=2, batch_size=8, seed=0)
    ps = TR.train_prompt(TINY, params, train.images, train.labels,
                         np.arange(4), tc, source_id="episode0")
    _, feats = P.composed_forward(TINY, params, test.images, [ps])
    pred = P.predict_source(feats["episode0"], ps).data.argmax(axis=1)
    plain_acc = float((pred == test.labels).mean())
    assert rep.mean_accuracy("apt", 1) == pytest.approx(plain_acc)
    # a single source gets weight 1, so distance weighting changes nothing
    assert rep.mean_accuracy("apt_w", 1) == pytest.approx(plain_acc)


def test_dil_beta_zero_matches_uniform_pool(params):
    train = D.gen_synthetic(3, 3, 6, image_size=16, seed=31, split="train")
    test = D.gen_synthetic(3, 3, 6, image_size=16, seed=31, split="test")
    rep = H.run_dil(TINY, params, train, test, train_domains=[0, 1],
                    seeds=(0,), epochs=1, k_protos=2, beta=0.0)
    assert rep.mean_accuracy("apt", 2) == pytest.approx(rep.mean_accuracy("apt_w", 2))
    n_heldout = int((test.domains == 2).sum())
    assert rep.config["n_eval"] == n_heldout


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def test_bench_rows_and_linearity(params):
    rep = H.run_bench(TINY, params, sizes=(0, 1, 2, 4), batch=2, repeats=1)
    zero = [r for r in rep.rows if int(r.setting) == 0]
    assert {r.method for r in zero} == {"composed", "naive", "per_model"}
    assert all(r.flops == P.flops_backbone(TINY) for r in zero)
    fit = H.bench_linearity(rep)
    assert fit["r2"] > 0.99
    assert fit["k"] == [1, 2, 4]
    naive = {int(r.setting): r.flops for r in rep.rows if r.method == "naive"}
    composed = {int(r.setting): r.flops for r in rep.rows if r.method == "composed"}
    assert naive[4] > composed[4]


def test_bench_linearity_needs_baseline():
    rep = ExperimentReport("bench_compose", {}, setting_name="n_prompts")
    rep.add(0, 1, "composed", 0.0, flops=10.0)
    rep.add(0, 2, "composed", 0.0, flops=20.0)
    with pytest.raises(PoolError):
        H.bench_linearity(rep)
