"""Miniature vision transformer with maskable attention.

Patch embedding, a learnable class token at position 0, positional
encodings, and a stack of pre-norm blocks (multi-head self-attention then
a GELU MLP, each with a residual connection). The model can be trained
through a throwaway proxy head, then frozen; frozen parameters are
immutable, content-fingerprinted, and shareable across threads.

Masking is additive: disallowed query/key pairs get -1e9 before the
softmax, which underflows to an exact zero weight after exp-normalization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import serialize
from . import tensor as T
from .errors import ConfigError, FormatError, MaskError, ShapeError
from .tensor import Tensor

MASK_FILL = -1e9

_MAGIC = b"ALCB"
_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    mlp_ratio: int = 4
    n_classes_proxy: int = 10
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("image_size", "patch_size", "channels", "d_model", "n_layers", "n_heads", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def d_mlp(self) -> int:
        return self.d_model * self.mlp_ratio

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


class BackboneParams:
    """Named parameter tensors plus a frozen flag and content fingerprint."""

    def __init__(self, tensors: dict[str, Tensor], frozen: bool = False):
        self.tensors = tensors
        self.frozen = False
        self._fingerprint: str | None = None
        if frozen:
            self.freeze()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def fingerprint(self) -> str:
        if self.frozen and self._fingerprint is not None:
            return self._fingerprint
        fp = serialize.fingerprint(self.arrays())
        if self.frozen:
            self._fingerprint = fp
        return fp

    def freeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        self._fingerprint = None
        return self

    def thaw_copy(self) -> "BackboneParams":
        """Writable, gradient-tracked deep copy (the frozen original is untouched)."""
        copies = {k: T.parameter(t.data.copy()) for k, t in self.tensors.items()}
        return BackboneParams(copies, frozen=False)

    def astype(self, dtype) -> "BackboneParams":
        cast = {
            k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for k, t in self.tensors.items()
        }
        out = BackboneParams(cast, frozen=False)
        if self.frozen:
            out.freeze()
        return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they land within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_backbone(config: BackboneConfig, seed: int = 0, dtype=None) -> BackboneParams:
    """Fresh trainable parameters: truncated-normal weights (std 0.02), zero
    biases and class token, unit/zero layer-norm affines."""
    if dtype is None:
        dtype = T.default_dtype()
    rng = np.random.default_rng(seed)
    d = config.d_model
    t: dict[str, Tensor] = {}

    def w(name, shape):
        t[name] = T.parameter(trunc_normal(rng, shape, dtype=dtype))

    def zeros(name, shape):
        t[name] = T.parameter(np.zeros(shape, dtype=dtype))

    def ones(name, shape):
        t[name] = T.parameter(np.ones(shape, dtype=dtype))

    w("embed/w", (config.patch_dim, d))
    zeros("cls", (d,))
    w("pos", (config.seq_len, d))
    for i in range(config.n_layers):
        p = f"blk{i}/"
        ones(p + "ln1/g", (d,))
        zeros(p + "ln1/b", (d,))
        for proj in ("q", "k", "v", "o"):
            w(p + f"attn/w{proj}", (d, d))
            zeros(p + f"attn/b{proj}", (d,))
        ones(p + "ln2/g", (d,))
        zeros(p + "ln2/b", (d,))
        w(p + "mlp/w1", (d, config.d_mlp))
        zeros(p + "mlp/b1", (config.d_mlp,))
        w(p + "mlp/w2", (config.d_mlp, d))
        zeros(p + "mlp/b2", (d,))
    ones("ln_f/g", (d,))
    zeros("ln_f/b", (d,))
    return BackboneParams(t)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def normalize_images(images: np.ndarray, dtype=None) -> np.ndarray:
    """Map uint8 pixels to [-1, 1]; float input is assumed already scaled."""
    if dtype is None:
        dtype = T.default_dtype()
    if images.dtype == np.uint8:
        return ((images.astype(dtype) / 255.0) - 0.5) / 0.5
    return images.astype(dtype, copy=False)


def patchify(config: BackboneConfig, images: np.ndarray) -> np.ndarray:
    """(B, H, W, C) pixels to (B, N, patch_dim) rows, row-major patch order."""
    b, h, w, c = images.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise ConfigError(
            f"image dims {(h, w, c)} do not match config "
            f"{(config.image_size, config.image_size, config.channels)}"
        )
    p = config.patch_size
    g = h // p
    x = images.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def embed(config: BackboneConfig, params: BackboneParams, images: np.ndarray) -> Tensor:
    """Patch tokens through the linear embedding, class token prepended,
    positional encodings added. Output (B, N+1, d)."""
    pixels = normalize_images(images, dtype=params["embed/w"].dtype)
    patches = patchify(config, pixels)
    b, n, pd = patches.shape
    flat = T.matmul(T.constant(patches.reshape(b * n, pd)), params["embed/w"])
    tokens = T.reshape(flat, (b, n, config.d_model))
    cls = T.expand_leading(T.reshape(params["cls"], (1, config.d_model)), b)
    seq = T.concat([cls, tokens], axis=1)
    pos = T.expand_leading(params["pos"], b)
    return T.add(seq, pos)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, S, d) -> (B*h, S, d/h)."""
    b, s, d = x.shape
    x = T.reshape(x, (b, s, n_heads, d // n_heads))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * n_heads, s, d // n_heads))


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B*h, S, d/h) -> (B, S, d)."""
    bh, s, dh = x.shape
    x = T.reshape(x, (bh // n_heads, n_heads, s, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (bh // n_heads, s, n_heads * dh))


def ln(params: BackboneParams, prefix: str, x: Tensor, eps: float) -> Tensor:
    return T.layernorm(x, params[prefix + "/g"], params[prefix + "/b"], eps)


def project(params: BackboneParams, layer: int, which: str, x: Tensor, n_heads: int) -> Tensor:
    """Apply one of the q/k/v attention projections; output (B*h, S, d/h)."""
    b, s, d = x.shape
    flat = T.reshape(x, (b * s, d))
    proj = T.bias_add(
        T.matmul(flat, params[f"blk{layer}/attn/w{which}"]),
        params[f"blk{layer}/attn/b{which}"],
    )
    return split_heads(T.reshape(proj, (b, s, d)), n_heads)


def attend(q: Tensor, k: Tensor, v: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention on (B*h, S, d/h) triples.

    `mask_bias` is an additive (S_q, S_k) float array (0 where allowed,
    MASK_FILL where not) broadcast over the batch-by-head axis.
    """
    dh = q.shape[-1]
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask_bias is not None:
        scores = T.add_const(scores, mask_bias)
    weights = T.softmax(scores, axis=-1)
    return T.bmm(weights, v)


def _mask_to_bias(mask: np.ndarray, dtype) -> np.ndarray:
    if mask.dtype != np.bool_:
        raise MaskError("attention mask must be boolean")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise MaskError(f"query row {bad} attends to nothing")
    bias = np.where(mask, 0.0, MASK_FILL)
    return bias.astype(dtype)


def block_forward(
    config: BackboneConfig,
    params: BackboneParams,
    layer: int,
    x: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """One pre-norm transformer block over (B, S, d) tokens.

    With a boolean (S, S) mask, disallowed pairs get MASK_FILL added to
    their attention scores; a row with no allowed key is a mask error.
    """
    b, s, d = x.shape
    if mask is not None:
        if mask.shape != (s, s):
            raise MaskError(f"mask shape {mask.shape} does not match sequence {(s, s)}")
        mask_bias = _mask_to_bias(mask, x.dtype)
    else:
        mask_bias = None
    xn = ln(params, f"blk{layer}/ln1", x, config.ln_eps)
    q = project(params, layer, "q", xn, config.n_heads)
    k = project(params, layer, "k", xn, config.n_heads)
    v = project(params, layer, "v", xn, config.n_heads)
    ctx = merge_heads(attend(q, k, v, mask_bias), config.n_heads)
    flat = T.reshape(ctx, (b * s, d))
    attn_out = T.bias_add(T.matmul(flat, params[f"blk{layer}/attn/wo"]), params[f"blk{layer}/attn/bo"])
    x = T.add(x, T.reshape(attn_out, (b, s, d)))
    x = T.add(x, mlp_forward(config, params, layer, x))
    return x


def mlp_forward(config: BackboneConfig, params: BackboneParams, layer: int, x: Tensor) -> Tensor:
    """Pre-norm MLP branch: LN2 -> linear -> GELU -> linear. Output (B, S, d)."""
    b, s, d = x.shape
    xn = ln(params, f"blk{layer}/ln2", x, config.ln_eps)
    h = T.bias_add(T.matmul(T.reshape(xn, (b * s, d)), params[f"blk{layer}/mlp/w1"]), params[f"blk{layer}/mlp/b1"])
    h = T.gelu(h)
    out = T.bias_add(T.matmul(h, params[f"blk{layer}/mlp/w2"]), params[f"blk{layer}/mlp/b2"])
    return T.reshape(out, (b, s, d))


def encode(config: BackboneConfig, params: BackboneParams, images: np.ndarray) -> Tensor:
    """Full forward to final-layer-normed tokens (B, N+1, d), differentiable."""
    x = embed(config, params, images)
    for layer in range(config.n_layers):
        x = block_forward(config, params, layer, x)
    return ln(params, "ln_f", x, config.ln_eps)


@dataclass
class BackboneCache:
    """Per-layer intermediate tokens from one frozen-backbone pass.

    `layer_inputs[l]` is the token sequence entering block l; key/value
    projections of those rows are computed lazily, once, and reused by
    every prompt that queries this batch.
    """

    config: BackboneConfig
    params: BackboneParams
    layer_inputs: list
    final_tokens: np.ndarray
    normed_final: np.ndarray
    _kv: dict = field(default_factory=dict)
    _normed_inputs: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.final_tokens.shape[0]

    def class_features(self) -> np.ndarray:
        """(B, d) class-token rows after the final layer norm."""
        return self.normed_final[:, 0]

    def normed_input(self, layer: int) -> np.ndarray:
        got = self._normed_inputs.get(layer)
        if got is None:
            x = T.constant(self.layer_inputs[layer])
            got = ln(self.params, f"blk{layer}/ln1", x, self.config.ln_eps).data
            self._normed_inputs[layer] = got
        return got

    def layer_kv(self, layer: int) -> tuple:
        """Cached (k, v) projections of block l's input rows, (B*h, S, d/h)."""
        got = self._kv.get(layer)
        if got is None:
            xn = T.constant(self.normed_input(layer))
            k = project(self.params, layer, "k", xn, self.config.n_heads).data
            v = project(self.params, layer, "v", xn, self.config.n_heads).data
            got = (k, v)
            self._kv[layer] = got
        return got

    def subset(self, idx) -> "BackboneCache":
        """Rows for a batch index selection; already-projected K/V come along."""
        idx = np.asarray(idx)
        sub = BackboneCache(self.config, self.params,
                            layer_inputs=[x[idx] for x in self.layer_inputs],
                            final_tokens=self.final_tokens[idx],
                            normed_final=self.normed_final[idx])
        h = self.config.n_heads
        sub._kv = {layer: (_slice_kv(k, idx, h), _slice_kv(v, idx, h))
                   for layer, (k, v) in self._kv.items()}
        return sub


def _slice_kv(kv: np.ndarray, idx, n_heads: int) -> np.ndarray:
    """Pick batch rows out of a head-flattened (B*h, S, d/h) projection."""
    bh, s, dh = kv.shape
    picked = kv.reshape(bh // n_heads, n_heads, s, dh)[idx]
    return np.ascontiguousarray(picked.reshape(len(idx) * n_heads, s, dh))


def forward_backbone(config: BackboneConfig, params: BackboneParams, images: np.ndarray) -> BackboneCache:
    """Prompt-independent backbone pass caching every block's input tokens.

    Runs outside any gradient tape (the backbone is frozen for every caller
    of this path); `encode` is the differentiable equivalent.
    """
    x = embed(config, params, images)
    layer_inputs = []
    for layer in range(config.n_layers):
        layer_inputs.append(x.data)
        x = block_forward(config, params, layer, x)
    final = x.data
    normed = ln(params, "ln_f", x, config.ln_eps).data
    return BackboneCache(config, params, layer_inputs, final, normed)


def pretrain_proxy(config: BackboneConfig, images: np.ndarray, labels: np.ndarray,
                   epochs: int, seed: int = 0, batch_size: int = 32,
                   base_lr: float = 0.3):
    """Supervised warm-up on a stand-in dataset; returns frozen params.

    Trains all backbone weights plus a throwaway classifier head, then
    discards the head. 0 epochs returns the (frozen) initialization.
    Defaults favor the larger batch this tiny model needs to train from
    scratch; gradient noise at batch 8 stalls it.
    """
    from . import training  # deferred: trainer builds on this module

    params = init_backbone(config, seed=seed)
    if epochs > 0:
        training.finetune_full(config, params, images, labels,
                               n_classes=config.n_classes_proxy, epochs=epochs,
                               seed=seed, batch_size=batch_size, base_lr=base_lr,
                               keep_head=False)
    return params.freeze()


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_backbone(path, config: BackboneConfig, params: BackboneParams) -> str:
    """Write config header + sorted named tensor records; returns fingerprint."""
    header = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    arrays = params.arrays()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in sorted(arrays):
            serialize.write_named(fh, name, arrays[name])
    return serialize.fingerprint(arrays)


def load_backbone(path) -> tuple[BackboneConfig, BackboneParams]:
    """Read a checkpoint; parameters come back frozen."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"not a backbone checkpoint (magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", fh.read(4))[0]
        config = BackboneConfig.from_dict(json.loads(fh.read(header_len).decode("utf-8")))
        tensors = {}
        for name, arr in serialize.iter_named(fh):
            tensors[name] = Tensor(arr)
    params = BackboneParams(tensors)
    _check_shapes(config, params)
    return config, params.freeze()


def _check_shapes(config: BackboneConfig, params: BackboneParams) -> None:
    expect = {
        "embed/w": (config.patch_dim, config.d_model),
        "cls": (config.d_model,),
        "pos": (config.seq_len, config.d_model),
    }
    for name, shape in expect.items():
        if name not in params.tensors or params[name].shape != shape:
            raise ShapeError(f"checkpoint tensor {name} missing or wrong shape")
