"""Optimizer, learning-rate schedule, and the tuning regimes.

Four regimes share one loop: prompt tuning (prompt + memory + head against
a frozen backbone, structured attention on during training exactly as at
inference), head-only probing, bias+head tuning, and full finetuning of a
cloned backbone. AdamW with decoupled weight decay throughout; linear
warmup into cosine annealing, with the base rate rescaled by
effective_batch/256.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import backbone as B
from . import kernels
from . import prompts as P
from . import tensor as T
from .backbone import BackboneConfig, BackboneParams
from .errors import ConfigError, DataError, LabelError, NumericError
from .tensor import Tensor

# Reference base learning rates per tuning regime at the original batch
# size; tiny desk-scale runs override finetune upward to keep the schedule
# invariant start_lr <= effective_base satisfiable at batch 8.
REFERENCE_BASE_LRS = {
    "finetune": 1e-5,
    "head_only": 5e-1,
    "prompt": 1e-1,
    "bias_head": 5e-3,
}
DESK_BASE_LRS = dict(REFERENCE_BASE_LRS, finetune=3e-3)

DEFAULT_PROMPT_EPOCHS = 20
DEFAULT_PARAGON_EPOCHS = 40


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    steps_per_epoch: int
    total_epochs: int
    warmup_epochs: int = 1
    start_lr: float = 1e-5
    min_lr: float = 1e-6
    batch_size: int = 8
    n_devices: int = 1

    def __post_init__(self):
        if self.steps_per_epoch <= 0 or self.total_epochs <= 0:
            raise ConfigError("schedule needs positive steps_per_epoch and total_epochs")
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}"
            )
        if not (self.min_lr <= self.start_lr <= self.effective_base):
            raise ConfigError(
                f"need min_lr <= start_lr <= effective base lr, got "
                f"{self.min_lr} / {self.start_lr} / {self.effective_base:.3e}"
            )

    @property
    def effective_base(self) -> float:
        return self.base_lr * (self.batch_size * self.n_devices) / 256.0

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Learning rate at a global step: linear ramp from start_lr to the
    effective base over the warmup, then cosine decay hitting min_lr
    exactly at the last step."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    warm = spec.warmup_steps
    if step < warm:
        frac = step / warm
        return spec.start_lr + (spec.effective_base - spec.start_lr) * frac
    last = spec.total_steps - 1
    if step >= last:
        return spec.min_lr
    t = (step - warm) / (last - warm)
    return spec.min_lr + 0.5 * (spec.effective_base - spec.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.02):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient for parameter {name!r}")
            kernels.adamw_update(
                p.data.reshape(-1), np.ascontiguousarray(g, dtype=p.data.dtype).reshape(-1),
                self._m[name].reshape(-1), self._v[name].reshape(-1),
                self.step_count, lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    """Everything one training job needs; round-trips through JSON."""

    regime: str = "prompt"
    variant: str = "deep"
    d_mem: int = P.DEFAULT_D_MEM
    epochs: int = DEFAULT_PROMPT_EPOCHS
    batch_size: int = 8
    n_devices: int = 1
    base_lr: float | None = None        # None: regime default (desk scale)
    start_lr: float = 1e-5
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    weight_decay: float = 0.02
    seed: int = 0
    augment: bool = False               # horizontal flip, half the samples

    def __post_init__(self):
        if self.regime not in REFERENCE_BASE_LRS:
            raise ConfigError(f"unknown regime {self.regime!r}; one of {sorted(REFERENCE_BASE_LRS)}")
        if self.variant not in P.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")

    def resolved_base_lr(self) -> float:
        return self.base_lr if self.base_lr is not None else DESK_BASE_LRS[self.regime]

    def schedule(self, steps_per_epoch: int) -> ScheduleSpec:
        return ScheduleSpec(
            base_lr=self.resolved_base_lr(),
            steps_per_epoch=steps_per_epoch,
            total_epochs=self.epochs,
            warmup_epochs=min(self.warmup_epochs, self.epochs - 1),
            start_lr=self.start_lr,
            min_lr=self.min_lr,
            batch_size=self.batch_size,
            n_devices=self.n_devices,
        )

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad training config JSON: {e}") from e
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


class TrainLog:
    """CSV training log: epoch, step, lr, train_loss, eval_acc."""

    COLUMNS = ("epoch", "step", "lr", "train_loss", "eval_acc")

    def __init__(self, path=None):
        self.path = path
        self.rows: list[tuple] = []

    def add(self, epoch, step, lr, train_loss, eval_acc=None):
        self.rows.append((epoch, step, f"{lr:.8e}", f"{train_loss:.6f}",
                          "" if eval_acc is None else f"{eval_acc:.4f}"))

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            w.writerows(self.rows)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _local_labels(labels: np.ndarray, label_map: np.ndarray, source: str) -> np.ndarray:
    lookup = {int(g): i for i, g in enumerate(label_map)}
    out = np.empty(labels.shape[0], dtype=np.int64)
    for j, lab in enumerate(labels):
        if int(lab) not in lookup:
            raise LabelError(f"label {int(lab)} not in label map of source {source!r}")
        out[j] = lookup[int(lab)]
    return out


def _flip_images(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[:, :, ::-1, :])


@dataclass
class TunedModel:
    """A backbone (possibly tuned) plus classifier head over global labels."""

    config: BackboneConfig
    params: BackboneParams
    head_w: Tensor
    head_b: Tensor
    label_map: np.ndarray

    def logits(self, images: np.ndarray) -> np.ndarray:
        feats = B.forward_backbone(self.config, self.params, images).class_features()
        out = T.bias_add(T.matmul(T.constant(feats), T.transpose(self.head_w, (1, 0))), self.head_b)
        return out.data

    def predict_probs(self, images: np.ndarray) -> np.ndarray:
        return kernels.softmax_rows(np.ascontiguousarray(self.logits(images)))

    def parameters(self) -> dict:
        out = dict(self.params.tensors)
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out


def _run_epochs(trainable: dict, loss_of_batch, n: int, tc: TrainConfig,
                eval_fn=None, log: TrainLog | None = None) -> None:
    """Shared loop: seeded shuffles, AdamW, warmup-cosine schedule."""
    steps_per_epoch = max(1, math.ceil(n / tc.batch_size))
    spec = tc.schedule(steps_per_epoch)
    opt = AdamW(trainable, weight_decay=tc.weight_decay)
    global_step = 0
    for epoch in range(tc.epochs):
        order = _epoch_order(tc.seed, epoch, n)
        epoch_loss = 0.0
        for b0 in range(0, n, tc.batch_size):
            idx = order[b0:b0 + tc.batch_size]
            lr = lr_at(spec, global_step)
            with T.GradTape() as tape:
                loss = loss_of_batch(idx)
            tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            epoch_loss += loss.item() * len(idx)
            global_step += 1
        acc = eval_fn() if eval_fn is not None else None
        if log is not None:
            log.add(epoch, global_step, lr_at(spec, global_step - 1), epoch_loss / n, acc)
    if log is not None:
        log.flush()


def train_prompt(config: BackboneConfig, params: BackboneParams,
                 images: np.ndarray, labels: np.ndarray, label_map,
                 tc: TrainConfig, source_id: str = "source",
                 eval_images=None, eval_labels=None,
                 log: TrainLog | None = None) -> P.SourcePromptSet:
    """Tune one source's prompt, memory, and head against a frozen backbone.

    Structured attention is on during training exactly as at inference. The
    backbone pass over the source is computed once up front and its
    key/value rows are sliced per batch, since frozen parameters make the
    phase-1 result identical every epoch.
    """
    if images.shape[0] == 0:
        raise DataError(f"source {source_id!r} has no samples")
    if not params.frozen:
        raise ConfigError("prompt tuning requires a frozen backbone")
    label_map = np.asarray(label_map, dtype=np.int64)
    local = _local_labels(labels, label_map, source_id)

    ps = P.init_prompt_set(config, source_id, label_map, params.fingerprint(),
                           seed=tc.seed, variant=tc.variant, d_mem=tc.d_mem)
    caches = [_precompute_cache(config, params, images)]
    variants = [local]
    if tc.augment:
        caches.append(_precompute_cache(config, params, _flip_images(images)))
        variants.append(local)
    flip_rng = np.random.default_rng([tc.seed, 7919])

    def loss_of_batch(idx):
        if tc.augment:
            pick = flip_rng.integers(0, 2, size=len(idx))
            sub = _mixed_subset(caches[0], caches[1], idx, pick)
        else:
            sub = caches[0].subset(idx)
        _, feats = P.composed_forward(config, params, None, [ps], cache=sub)
        logits = P.predict_source(feats[source_id], ps, apply_softmax=False)
        return T.cross_entropy(logits, local[idx])

    eval_fn = None
    if eval_images is not None:
        eval_local = _local_labels(eval_labels, label_map, source_id)

        def eval_fn():
            _, feats = P.composed_forward(config, params, eval_images, [ps])
            probs = P.predict_source(feats[source_id], ps).data
            return float((probs.argmax(axis=1) == eval_local).mean())

    _run_epochs(ps.parameters(), loss_of_batch, images.shape[0], tc, eval_fn, log)
    return ps


def _precompute_cache(config, params, images) -> B.BackboneCache:
    cache = B.forward_backbone(config, params, images)
    for layer in range(config.n_layers):
        cache.layer_kv(layer)
    return cache


def _mixed_subset(cache_a: B.BackboneCache, cache_b: B.BackboneCache, idx, pick_b) -> B.BackboneCache:
    """Per-sample choice between two precomputed caches (augmentation)."""
    h = cache_a.config.n_heads
    kv = {}
    for layer in range(cache_a.config.n_layers):
        ka, va = cache_a.layer_kv(layer)
        kb, vb = cache_b.layer_kv(layer)
        k = np.where(pick_b[:, None, None, None],
                     kb.reshape(-1, h, *kb.shape[1:])[idx],
                     ka.reshape(-1, h, *ka.shape[1:])[idx])
        v = np.where(pick_b[:, None, None, None],
                     vb.reshape(-1, h, *vb.shape[1:])[idx],
                     va.reshape(-1, h, *va.shape[1:])[idx])
        kv[layer] = (np.ascontiguousarray(k.reshape(len(idx) * h, *k.shape[2:])),
                     np.ascontiguousarray(v.reshape(len(idx) * h, *v.shape[2:])))
    sub = B.BackboneCache(cache_a.config, cache_a.params,
                          layer_inputs=[np.where(pick_b[:, None, None], b_[idx], a_[idx])
                                        for a_, b_ in zip(cache_a.layer_inputs, cache_b.layer_inputs)],
                          final_tokens=cache_a.final_tokens[idx],
                          normed_final=cache_a.normed_final[idx])
    sub._kv = kv
    return sub


def _head_pair(config: BackboneConfig, n_classes: int, dtype=None) -> tuple[Tensor, Tensor]:
    if dtype is None:
        dtype = T.default_dtype()
    w = T.parameter(np.zeros((n_classes, config.d_model), dtype=dtype))
    b = T.parameter(np.zeros(n_classes, dtype=dtype))
    return w, b


def train_head_only(config: BackboneConfig, params: BackboneParams,
                    images: np.ndarray, labels: np.ndarray, label_map,
                    tc: TrainConfig, log: TrainLog | None = None) -> TunedModel:
    """Linear probe: class features are fixed, only (W, b) move."""
    if images.shape[0] == 0:
        raise DataError("head-only training needs samples")
    label_map = np.asarray(label_map, dtype=np.int64)
    local = _local_labels(labels, label_map, "head_only")
    feats = B.forward_backbone(config, params, images).class_features()
    w, b = _head_pair(config, label_map.shape[0])

    def loss_of_batch(idx):
        x = T.constant(feats[idx])
        logits = T.bias_add(T.matmul(x, T.transpose(w, (1, 0))), b)
        return T.cross_entropy(logits, local[idx])

    _run_epochs({"head/w": w, "head/b": b}, loss_of_batch, images.shape[0], tc, log=log)
    return TunedModel(config, params, w, b, label_map)


def _is_bias_name(name: str) -> bool:
    return name.endswith("/b") or "/b" == name[-2:] or name.split("/")[-1].startswith("b")


def train_bias_head(config: BackboneConfig, params: BackboneParams,
                    images: np.ndarray, labels: np.ndarray, label_map,
                    tc: TrainConfig, log: TrainLog | None = None) -> TunedModel:
    """Tune every bias term (attention, MLP, layer-norm shifts) plus the head."""
    if images.shape[0] == 0:
        raise DataError("bias+head training needs samples")
    label_map = np.asarray(label_map, dtype=np.int64)
    local = _local_labels(labels, label_map, "bias_head")
    work = params.thaw_copy()
    trainable: dict[str, Tensor] = {}
    for name, t in work.tensors.items():
        if _is_bias_name(name):
            trainable[name] = t
        else:
            t.requires_grad = False
    w, b = _head_pair(config, label_map.shape[0])
    trainable["head/w"] = w
    trainable["head/b"] = b

    def loss_of_batch(idx):
        out = B.encode(config, work, images[idx])
        cls = T.reshape(T.slice_axis(out, 1, 0, 1), (len(idx), config.d_model))
        logits = T.bias_add(T.matmul(cls, T.transpose(w, (1, 0))), b)
        return T.cross_entropy(logits, local[idx])

    _run_epochs(trainable, loss_of_batch, images.shape[0], tc, log=log)
    return TunedModel(config, work, w, b, label_map)


def finetune_full(config: BackboneConfig, params: BackboneParams,
                  images: np.ndarray, labels: np.ndarray, n_classes: int | None = None,
                  label_map=None, tc: TrainConfig | None = None,
                  epochs: int | None = None, seed: int | None = None,
                  batch_size: int | None = None, base_lr: float | None = None,
                  keep_head: bool = True, log: TrainLog | None = None):
    """Train every backbone weight plus a head on a writable clone.

    Mutates `params` in place only when it is unfrozen (the proxy
    pretraining path); a frozen input is cloned first.
    """
    if images.shape[0] == 0:
        raise DataError("finetuning needs samples")
    if tc is None:
        tc = TrainConfig(regime="finetune",
                         epochs=epochs if epochs is not None else DEFAULT_PROMPT_EPOCHS,
                         seed=seed if seed is not None else 0,
                         batch_size=batch_size if batch_size is not None else 8,
                         base_lr=base_lr)
    if label_map is None:
        label_map = np.arange(n_classes if n_classes is not None else int(labels.max()) + 1)
    label_map = np.asarray(label_map, dtype=np.int64)
    local = _local_labels(labels, label_map, "finetune")
    work = params.thaw_copy() if params.frozen else params
    for t in work.tensors.values():
        t.requires_grad = True
    w, b = _head_pair(config, label_map.shape[0])
    trainable = dict(work.tensors)
    trainable["head/w"] = w
    trainable["head/b"] = b

    flip_rng = np.random.default_rng([tc.seed, 7919])

    def loss_of_batch(idx):
        batch = images[idx]
        if tc.augment:
            pick = flip_rng.integers(0, 2, size=len(idx)).astype(bool)
            if pick.any():
                batch = batch.copy()
                batch[pick] = batch[pick][:, :, ::-1, :]
        out = B.encode(config, work, batch)
        cls = T.reshape(T.slice_axis(out, 1, 0, 1), (len(idx), config.d_model))
        logits = T.bias_add(T.matmul(cls, T.transpose(w, (1, 0))), b)
        return T.cross_entropy(logits, local[idx])

    _run_epochs(trainable, loss_of_batch, images.shape[0], tc, log=log)
    model = TunedModel(config, work, w, b, label_map)
    if not keep_head:
        return work
    return model
