"""Optimizer, schedule, and training-loop tests."""

import json

import numpy as np
import pytest

from alacarte import backbone as B
from alacarte import prompts as P
from alacarte import tensor as T
from alacarte import training as TR
from alacarte.errors import ConfigError, DataError, NumericError

TINY = B.BackboneConfig(image_size=16, patch_size=8, d_model=32, n_layers=2, n_heads=4)


@pytest.fixture(scope="module")
def params():
    return B.init_backbone(TINY, seed=0).freeze()


def toy_data(n=24, n_classes=3, seed=0, size=16):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    imgs = np.zeros((n, size, size, 3), dtype=np.uint8)
    for i, y in enumerate(labels):
        imgs[i] = rng.integers(0, 40, (size, size, 3))
        band = slice(y * 5, y * 5 + 5)
        imgs[i, band, :, y % 3] = 220
    return imgs, labels


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_endpoints_exact():
    spec = TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=10, total_epochs=10,
                           warmup_epochs=1, start_lr=1e-5, min_lr=1e-6)
    assert TR.lr_at(spec, 0) == 1e-5
    assert TR.lr_at(spec, spec.total_steps - 1) == 1e-6
    assert spec.effective_base == pytest.approx(0.1 * 8 / 256)


def test_schedule_warmup_is_linear_then_cosine_decreases():
    spec = TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=10, total_epochs=5,
                           warmup_epochs=1, start_lr=1e-5, min_lr=1e-6)
    lrs = [TR.lr_at(spec, s) for s in range(spec.total_steps)]
    ramp = np.diff(lrs[:11])
    np.testing.assert_allclose(ramp, ramp[0], rtol=1e-9)
    assert lrs[10] == pytest.approx(spec.effective_base)
    tail = np.diff(lrs[10:])
    assert (tail <= 1e-12).all()


def test_schedule_device_scaling():
    one = TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=5, total_epochs=10,
                          n_devices=1)
    four = TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=5, total_epochs=10,
                           n_devices=4)
    assert four.effective_base == pytest.approx(4 * one.effective_base)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=5, total_epochs=2,
                        warmup_epochs=5)
    with pytest.raises(ConfigError):
        # start_lr above the effective base breaks the ramp
        TR.ScheduleSpec(base_lr=1e-7, steps_per_epoch=5, total_epochs=10,
                        start_lr=1e-5)
    with pytest.raises(ConfigError):
        TR.ScheduleSpec(base_lr=0.1, steps_per_epoch=5, total_epochs=10,
                        min_lr=0.5)


def test_reference_rates_per_regime():
    assert TR.REFERENCE_BASE_LRS["prompt"] == pytest.approx(0.1)
    assert TR.REFERENCE_BASE_LRS["head_only"] == pytest.approx(0.5)
    assert TR.REFERENCE_BASE_LRS["bias_head"] == pytest.approx(5e-3)
    assert TR.REFERENCE_BASE_LRS["finetune"] == pytest.approx(1e-5)
    # the desk override keeps full finetuning trainable at tiny batch sizes
    assert TR.DESK_BASE_LRS["finetune"] > TR.REFERENCE_BASE_LRS["finetune"]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_decoupled_decay_zero_grad():
    p = T.parameter(np.ones(4, dtype=np.float32))
    opt = TR.AdamW({"p": p}, weight_decay=0.02)
    p.grad = np.zeros(4, dtype=np.float32)
    opt.step(0.1)
    np.testing.assert_allclose(p.data, 0.998, rtol=1e-6)


def test_adamw_first_step_is_signed_unit_times_lr():
    p = T.parameter(np.zeros(3, dtype=np.float64))
    opt = TR.AdamW({"p": p}, weight_decay=0.0)
    p.grad = np.array([0.5, -2.0, 1e-3])
    opt.step(0.01)
    # bias-corrected m-hat/sqrt(v-hat) is sign(g) on step 1 (up to eps)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adamw_nan_grad_raises():
    p = T.parameter(np.ones(2, dtype=np.float32))
    opt = TR.AdamW({"p": p})
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(NumericError):
        opt.step(0.1)


def test_adamw_converges_on_quadratic():
    p = T.parameter(np.array([5.0, -3.0]))
    opt = TR.AdamW({"p": p}, weight_decay=0.0)
    for _ in range(300):
        p.grad = 2 * p.data
        opt.step(0.05)
    assert np.abs(p.data).max() < 1e-2


# ---------------------------------------------------------------------------
# train config
# ---------------------------------------------------------------------------

def test_train_config_from_json_strict(tmp_path):
    path = tmp_path / "tc.json"
    path.write_text(json.dumps({"regime": "prompt", "epochs": 3, "seed": 5}))
    tc = TR.TrainConfig.from_file(path)
    assert tc.epochs == 3 and tc.seed == 5
    # round trips through its own serialization
    again = TR.TrainConfig.from_json(tc.to_json())
    assert again == tc
    path.write_text(json.dumps({"regime": "prompt", "bogus": 1}))
    with pytest.raises(ConfigError):
        TR.TrainConfig.from_file(path)
    with pytest.raises(ConfigError):
        TR.TrainConfig.from_json("{not json")


def test_train_config_regime_default_lrs():
    assert TR.TrainConfig(regime="prompt").resolved_base_lr() == pytest.approx(0.1)
    assert TR.TrainConfig(regime="finetune").resolved_base_lr() == pytest.approx(
        TR.DESK_BASE_LRS["finetune"])
    assert TR.TrainConfig(regime="prompt", base_lr=0.7).resolved_base_lr() == 0.7
    with pytest.raises(ConfigError):
        TR.TrainConfig(regime="nonsense")


def test_train_log_csv(tmp_path):
    out = tmp_path / "log.csv"
    log = TR.TrainLog(out)
    log.add(epoch=0, step=0, lr=0.1, train_loss=2.0, eval_acc=None)
    log.add(epoch=0, step=1, lr=0.2, train_loss=1.5, eval_acc=0.5)
    log.flush()
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "epoch,step,lr,train_loss,eval_acc"
    assert lines[1] == "0,0,1.00000000e-01,2.000000,"
    assert lines[2] == "0,1,2.00000000e-01,1.500000,0.5000"
    # pathless logs accumulate in memory and flush is a no-op
    mem = TR.TrainLog()
    mem.add(0, 0, 0.1, 1.0)
    mem.flush()
    assert len(mem.rows) == 1


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def test_prompt_training_reproducible(params):
    imgs, labels = toy_data()
    tc = TR.TrainConfig(regime="prompt", epochs=2, batch_size=8, seed=9)
    a = TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc, source_id="a")
    b = TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc, source_id="a")
    for k in a.parameters():
        np.testing.assert_array_equal(a.parameters()[k].data, b.parameters()[k].data)
    tc2 = TR.TrainConfig(regime="prompt", epochs=2, batch_size=8, seed=10)
    c = TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc2, source_id="a")
    assert any(not np.array_equal(a.parameters()[k].data, c.parameters()[k].data)
               for k in a.parameters())


def test_prompt_training_leaves_backbone_untouched(params):
    imgs, labels = toy_data(seed=1)
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    fp = params.fingerprint()
    tc = TR.TrainConfig(regime="prompt", epochs=2, batch_size=8, seed=0)
    TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc)
    assert params.fingerprint() == fp
    for k, arr in before.items():
        np.testing.assert_array_equal(params.tensors[k].data, arr)


def test_prompt_training_requires_frozen():
    loose = B.init_backbone(TINY, seed=0)
    imgs, labels = toy_data()
    tc = TR.TrainConfig(regime="prompt", epochs=1)
    with pytest.raises(ConfigError):
        TR.train_prompt(TINY, loose, imgs, labels, [0, 1, 2], tc)


def test_prompt_training_rejects_empty(params):
    tc = TR.TrainConfig(regime="prompt", epochs=1)
    with pytest.raises(DataError):
        TR.train_prompt(TINY, params, np.zeros((0, 16, 16, 3), np.uint8),
                        np.zeros(0, np.int64), [0], tc)


def test_prompt_training_learns_separable_toy(params):
    imgs, labels = toy_data(n=48, seed=2)
    tc = TR.TrainConfig(regime="prompt", epochs=15, batch_size=8, seed=0)
    ps = TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc)
    _, feats = P.composed_forward(TINY, params, imgs, [ps])
    acc = (P.predict_source(feats[ps.source_id], ps).data.argmax(1) == labels).mean()
    assert acc > 0.6


def test_prompt_training_with_augment_runs(params):
    imgs, labels = toy_data(n=16, seed=3)
    tc = TR.TrainConfig(regime="prompt", epochs=1, batch_size=8, seed=0, augment=True)
    ps = TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc)
    assert ps.prompt.data.shape == (32,)


def test_head_only_learns_and_freezes_features(params):
    imgs, labels = toy_data(n=48, seed=4)
    tc = TR.TrainConfig(regime="head_only", epochs=25, batch_size=16, seed=0)
    model = TR.train_head_only(TINY, params, imgs, labels, [0, 1, 2], tc)
    acc = (model.predict_probs(imgs).argmax(1) == labels).mean()
    assert acc > 0.8


def test_bias_head_moves_only_biases(params):
    imgs, labels = toy_data(n=16, seed=5)
    tc = TR.TrainConfig(regime="bias_head", epochs=1, batch_size=8, seed=0)
    model = TR.train_bias_head(TINY, params, imgs, labels, [0, 1, 2], tc)
    for name, t in model.params.tensors.items():
        original = params.tensors[name].data
        if TR._is_bias_name(name):
            continue
        np.testing.assert_array_equal(t.data, original)
    changed = sum(not np.array_equal(model.params.tensors[n].data, params.tensors[n].data)
                  for n in params.tensors)
    assert changed > 0


def test_finetune_leaves_frozen_original(params):
    imgs, labels = toy_data(n=16, seed=6)
    fp = params.fingerprint()
    model = TR.finetune_full(TINY, params, imgs, labels, n_classes=3,
                             epochs=1, seed=0, batch_size=8)
    assert params.fingerprint() == fp
    assert any(not np.array_equal(model.params.tensors[n].data, params.tensors[n].data)
               for n in params.tensors)


def test_eval_logging_during_prompt_training(params):
    imgs, labels = toy_data(n=16, seed=7)
    log = TR.TrainLog()
    tc = TR.TrainConfig(regime="prompt", epochs=2, batch_size=8, seed=0)
    TR.train_prompt(TINY, params, imgs, labels, [0, 1, 2], tc,
                    eval_images=imgs, eval_labels=labels, log=log)
    # one row per epoch, each carrying a formatted eval accuracy
    assert len(log.rows) == 2
    accs = [r[4] for r in log.rows if r[4] != ""]
    assert len(accs) == 2
    assert all(0.0 <= float(a) <= 1.0 for a in accs)
