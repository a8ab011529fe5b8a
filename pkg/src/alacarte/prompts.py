"""Per-source prompts, structured attention, and the two-phase composed pass.

Each data source owns a ``SourcePromptSet``: one prompt token, optional
per-layer memory tokens, and a local classifier head, all trained against
a frozen backbone. At inference any subset of sources is composed under a
structured attention mask:

  - backbone tokens attend only backbone tokens,
  - a prompt attends the backbone tokens, itself, and its own memory,
  - memory tokens are keys only and never queries.

Because of that structure the backbone pass is prompt-independent and each
prompt's output is independent of which other prompts are present, so
composition runs in two phases: one backbone pass whose per-layer rows are
cached, then a cheap per-prompt cross-attention sweep. A reference
single-pass implementation over the full concatenation is kept for
oracle comparison, and an unmasked variant serves as the naive
concatenation baseline.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import backbone as B
from . import serialize
from . import tensor as T
from .backbone import MASK_FILL, BackboneCache, BackboneConfig, BackboneParams
from .errors import (
    CompositionError,
    ConfigError,
    FormatError,
    LabelError,
    ShapeError,
    StalePromptError,
)
from .tensor import Tensor

DEFAULT_D_MEM = 5

VARIANTS = ("deep", "deep_shared", "shallow")

_MAGIC = b"ALCP"
_VERSION = 1


@dataclass
class SourcePromptSet:
    """One source's trainable bundle: prompt, memory, head, label map."""

    source_id: str
    variant: str
    prompt: Tensor                 # (d,)
    memory: Tensor | None          # deep (L, d_mem, d), deep_shared (d_mem, d), shallow None
    head_w: Tensor                 # (n_local, d)
    head_b: Tensor                 # (n_local,)
    label_map: np.ndarray          # (n_local,) global class ids
    backbone_fingerprint: str
    prototypes: np.ndarray | None = None   # (K, d) feature-space centroids

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown prompt variant {self.variant!r}")
        self.label_map = np.asarray(self.label_map, dtype=np.int64)
        if len(np.unique(self.label_map)) != self.label_map.shape[0]:
            raise LabelError(f"label map for {self.source_id!r} is not injective")
        if self.head_w.shape[0] != self.label_map.shape[0]:
            raise ShapeError(
                f"head rows {self.head_w.shape[0]} != label map size {self.label_map.shape[0]}"
            )

    @property
    def n_local(self) -> int:
        return self.label_map.shape[0]

    @property
    def d_mem(self) -> int:
        if self.memory is None:
            return 0
        return self.memory.shape[-2]

    def memory_at(self, layer: int) -> Tensor | None:
        """Memory rows used at one layer: (d_mem, d) or None (shallow)."""
        if self.memory is None:
            return None
        if self.variant == "deep_shared":
            return self.memory
        return T.reshape(T.slice_axis(self.memory, 0, layer, layer + 1), self.memory.shape[1:])

    def parameters(self) -> dict[str, Tensor]:
        out = {"prompt": self.prompt, "head/w": self.head_w, "head/b": self.head_b}
        if self.memory is not None:
            out["memory"] = self.memory
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.parameters().items()}

    def detach_copy(self) -> "SourcePromptSet":
        return SourcePromptSet(
            source_id=self.source_id,
            variant=self.variant,
            prompt=T.constant(self.prompt.data.copy()),
            memory=None if self.memory is None else T.constant(self.memory.data.copy()),
            head_w=T.constant(self.head_w.data.copy()),
            head_b=T.constant(self.head_b.data.copy()),
            label_map=self.label_map.copy(),
            backbone_fingerprint=self.backbone_fingerprint,
            prototypes=None if self.prototypes is None else self.prototypes.copy(),
        )


def init_prompt_set(
    config: BackboneConfig,
    source_id: str,
    label_map,
    backbone_fingerprint: str,
    seed: int = 0,
    variant: str = "deep",
    d_mem: int = DEFAULT_D_MEM,
    dtype=None,
) -> SourcePromptSet:
    """Truncated-normal prompt, memory, and head weight (std 0.02); zero bias.

    The head weight starts non-zero so the first backward pass already
    carries signal into the prompt rather than waiting for the head to
    grow away from zero."""
    if dtype is None:
        dtype = T.default_dtype()
    rng = np.random.default_rng(seed)
    d = config.d_model
    label_map = np.asarray(label_map, dtype=np.int64)
    prompt = T.parameter(B.trunc_normal(rng, (d,), dtype=dtype))
    if variant == "deep":
        memory = T.parameter(B.trunc_normal(rng, (config.n_layers, d_mem, d), dtype=dtype))
    elif variant == "deep_shared":
        memory = T.parameter(B.trunc_normal(rng, (d_mem, d), dtype=dtype))
    elif variant == "shallow":
        memory = None
    else:
        raise ConfigError(f"unknown prompt variant {variant!r}")
    n_local = label_map.shape[0]
    head_w = T.parameter(B.trunc_normal(rng, (n_local, d), dtype=dtype))
    head_b = T.parameter(np.zeros(n_local, dtype=dtype))
    return SourcePromptSet(source_id, variant, prompt, memory, head_w, head_b,
                           label_map, backbone_fingerprint)


# ---------------------------------------------------------------------------
# structured mask
# ---------------------------------------------------------------------------

@dataclass
class ComposedMask:
    """Boolean (queries x keys) mask over [backbone | prompts | memories].

    Queries are the propagating tokens (backbone rows then one row per
    prompt); key columns append every prompt's memory block after the
    propagating tokens. Memory tokens have no query rows at all.
    """

    mask: np.ndarray
    n_tokens: int
    prompt_ids: list
    mem_widths: list

    @property
    def n_prompts(self) -> int:
        return len(self.prompt_ids)

    @property
    def n_queries(self) -> int:
        return self.mask.shape[0]

    @property
    def n_keys(self) -> int:
        return self.mask.shape[1]

    def prompt_row(self, i: int) -> int:
        return self.n_tokens + i

    def memory_cols(self, i: int) -> slice:
        start = self.n_tokens + self.n_prompts + int(sum(self.mem_widths[:i]))
        return slice(start, start + self.mem_widths[i])


def build_mask(n_tokens: int, prompt_ids, mem_widths=None, d_mem: int = DEFAULT_D_MEM) -> ComposedMask:
    """Structured attention mask for k prompts over an n_tokens backbone.

    Backbone rows see only backbone columns; prompt i's row sees the
    backbone, its own column, and its own memory block; memory tokens are
    never queries.
    """
    prompt_ids = list(prompt_ids)
    if len(set(prompt_ids)) != len(prompt_ids):
        raise CompositionError(f"duplicate prompt ids in {prompt_ids}")
    k = len(prompt_ids)
    if mem_widths is None:
        mem_widths = [d_mem] * k
    mem_widths = [int(w) for w in mem_widths]
    if len(mem_widths) != k:
        raise CompositionError("one memory width per prompt required")
    n_q = n_tokens + k
    n_k = n_tokens + k + sum(mem_widths)
    mask = np.zeros((n_q, n_k), dtype=bool)
    mask[:n_tokens, :n_tokens] = True
    out = ComposedMask(mask, n_tokens, prompt_ids, mem_widths)
    for i in range(k):
        row = out.prompt_row(i)
        mask[row, :n_tokens] = True
        mask[row, n_tokens + i] = True
        mask[row, out.memory_cols(i)] = True
    return out


# ---------------------------------------------------------------------------
# reference single-pass forward (oracle) and the naive baseline
# ---------------------------------------------------------------------------

def _stack_prompt_tokens(prompt_sets, batch: int) -> Tensor:
    rows = [T.reshape(ps.prompt, (1, ps.prompt.shape[0])) for ps in prompt_sets]
    stacked = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    return T.expand_leading(stacked, batch)


def _layer_memory_rows(prompt_sets, layer: int):
    """Concatenated (M, d) memory rows for one layer plus per-prompt widths."""
    parts, widths = [], []
    for ps in prompt_sets:
        m = ps.memory_at(layer)
        if m is None:
            widths.append(0)
        else:
            widths.append(m.shape[0])
            parts.append(m)
    if not parts:
        return None, widths
    joined = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return joined, widths


def _block_with_memory(config, params, layer, x: Tensor, mem_rows: Tensor | None,
                       mask_bias: np.ndarray | None) -> Tensor:
    """Pre-norm block where extra non-propagating rows join the key set."""
    b, s, d = x.shape
    xn = B.ln(params, f"blk{layer}/ln1", x, config.ln_eps)
    if mem_rows is not None:
        m = T.expand_leading(mem_rows, b)
        mn = B.ln(params, f"blk{layer}/ln1", m, config.ln_eps)
        kv_in = T.concat([xn, mn], axis=1)
    else:
        kv_in = xn
    q = B.project(params, layer, "q", xn, config.n_heads)
    k = B.project(params, layer, "k", kv_in, config.n_heads)
    v = B.project(params, layer, "v", kv_in, config.n_heads)
    ctx = B.merge_heads(B.attend(q, k, v, mask_bias), config.n_heads)
    flat = T.reshape(ctx, (b * s, d))
    attn_out = T.bias_add(T.matmul(flat, params[f"blk{layer}/attn/wo"]), params[f"blk{layer}/attn/bo"])
    x = T.add(x, T.reshape(attn_out, (b, s, d)))
    return T.add(x, B.mlp_forward(config, params, layer, x))


def single_pass_forward(config: BackboneConfig, params: BackboneParams,
                        images: np.ndarray, prompt_sets, masked: bool = True):
    """Self-attention over the full [backbone | prompts] concatenation.

    With ``masked`` the structured mask is applied layer by layer (the
    oracle the two-phase path must match); without it every token attends
    every key, which is the naive concatenation baseline. Memory rows join
    the key set at their own layer in both cases.

    Returns (backbone tokens (B, S, d), {source_id: (B, d) prompt feature}).
    """
    prompt_sets = list(prompt_sets)
    s = config.seq_len
    k = len(prompt_sets)
    x = B.embed(config, params, images)
    if k:
        x = T.concat([x, _stack_prompt_tokens(prompt_sets, x.shape[0])], axis=1)
    for layer in range(config.n_layers):
        mem_rows, widths = _layer_memory_rows(prompt_sets, layer)
        if masked and k:
            cm = build_mask(s, [ps.source_id for ps in prompt_sets], mem_widths=widths)
            bias = np.where(cm.mask, 0.0, MASK_FILL).astype(x.dtype)
        elif masked:
            bias = None
        else:
            bias = None  # full attention: nothing masked
        x = _block_with_memory(config, params, layer, x, mem_rows, bias)
    x = B.ln(params, "ln_f", x, config.ln_eps)
    z_final = T.slice_axis(x, 1, 0, s)
    feats = {}
    for i, ps in enumerate(prompt_sets):
        row = T.slice_axis(x, 1, s + i, s + i + 1)
        feats[ps.source_id] = T.reshape(row, (x.shape[0], config.d_model))
    return z_final, feats


def naive_concat_forward(config: BackboneConfig, params: BackboneParams,
                         images: np.ndarray, prompt_sets):
    """Concatenation without structured attention: all tokens attend all.

    Kept as the ablation baseline; backbone tokens see the prompts here, so
    outputs shift whenever the composed subset changes.
    """
    return single_pass_forward(config, params, images, prompt_sets, masked=False)


# ---------------------------------------------------------------------------
# two-phase composed forward
# ---------------------------------------------------------------------------

def check_fingerprints(params: BackboneParams, prompt_sets) -> None:
    fp = params.fingerprint()
    for ps in prompt_sets:
        if ps.backbone_fingerprint != fp:
            raise StalePromptError(
                f"prompt set {ps.source_id!r} was trained against backbone "
                f"{ps.backbone_fingerprint[:12]}, current is {fp[:12]}"
            )


def _phase2_layer(config, params, layer, p: Tensor, group, cache: BackboneCache) -> Tensor:
    """Advance one group of prompt tokens through block `layer`.

    `p` is (B, k, d) current prompt rows for prompts sharing one memory
    width; keys are the cached backbone rows plus each prompt's own row
    and memory block. Relative key order [backbone | self | memory]
    matches the masked single-pass, so the softmax sees the same terms in
    the same sequence.
    """
    b, k, d = p.shape
    h = config.n_heads
    dh = config.head_dim
    s = config.seq_len
    kz, vz = cache.layer_kv(layer)     # (B*h, S, dh) backbone keys/values

    pn = B.ln(params, f"blk{layer}/ln1", p, config.ln_eps)
    q = B.project(params, layer, "q", pn, h)           # (B*h, k, dh)
    k_self = B.project(params, layer, "k", pn, h)      # (B*h, k, dh)
    v_self = B.project(params, layer, "v", pn, h)

    mem = _layer_memory_rows(group, layer)[0]
    if mem is not None:
        d_mem = group[0].d_mem
        mn = B.ln(params, f"blk{layer}/ln1", T.reshape(mem, (k, d_mem, d)), config.ln_eps)
        k_mem = B.project(params, layer, "k", mn, h)   # (k*h, d_mem, dh)
        v_mem = B.project(params, layer, "v", mn, h)

        def to_batch(t):
            t = T.reshape(t, (k, h, d_mem, dh))
            t = T.transpose(t, (1, 0, 2, 3))           # (h, k, d_mem, dh)
            t = T.expand_leading(t, b)                 # (B, h, k, d_mem, dh)
            return T.reshape(t, (b * h * k, d_mem, dh))

        k_own = T.concat([T.reshape(k_self, (b * h * k, 1, dh)), to_batch(k_mem)], axis=1)
        v_own = T.concat([T.reshape(v_self, (b * h * k, 1, dh)), to_batch(v_mem)], axis=1)
    else:
        d_mem = 0
        k_own = T.reshape(k_self, (b * h * k, 1, dh))
        v_own = T.reshape(v_self, (b * h * k, 1, dh))

    scores_z = T.bmm(q, T.constant(kz.transpose(0, 2, 1)))              # (B*h, k, S)
    scores_own = T.bmm(T.reshape(q, (b * h * k, 1, dh)), T.transpose(k_own, (0, 2, 1)))
    scores_own = T.reshape(scores_own, (b * h, k, 1 + d_mem))
    scores = T.scale(T.concat([scores_z, scores_own], axis=2), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)                                # (B*h, k, S+1+d_mem)

    ctx_z = T.bmm(T.slice_axis(weights, 2, 0, s), T.constant(vz))       # (B*h, k, dh)
    w_own = T.reshape(T.slice_axis(weights, 2, s, s + 1 + d_mem), (b * h * k, 1, 1 + d_mem))
    ctx_own = T.reshape(T.bmm(w_own, v_own), (b * h, k, dh))
    ctx = B.merge_heads(T.add(ctx_z, ctx_own), h)                       # (B, k, d)

    flat = T.reshape(ctx, (b * k, d))
    attn_out = T.bias_add(T.matmul(flat, params[f"blk{layer}/attn/wo"]), params[f"blk{layer}/attn/bo"])
    p = T.add(p, T.reshape(attn_out, (b, k, d)))
    return T.add(p, B.mlp_forward(config, params, layer, p))


def composed_forward(config: BackboneConfig, params: BackboneParams,
                     images: np.ndarray, prompt_sets, cache: BackboneCache | None = None,
                     check: bool = True):
    """Two-phase composed pass over any subset of prompt sets.

    Phase 1 runs (or reuses) the prompt-independent backbone pass; phase 2
    advances each prompt through every block by cross-attending the cached
    rows, its own row, and its memory. Returns (BackboneCache,
    {source_id: (B, d) feature}); features are Tensors when any prompt
    parameter is gradient-tracked, otherwise plain arrays are wrapped as
    constants. The backbone rows are the phase-1 rows by construction, so
    composing never perturbs them.
    """
    prompt_sets = list(prompt_sets)
    ids = [ps.source_id for ps in prompt_sets]
    if len(set(ids)) != len(ids):
        raise CompositionError(f"duplicate source ids in composition: {ids}")
    if check:
        check_fingerprints(params, prompt_sets)
    if cache is None:
        cache = B.forward_backbone(config, params, images)
    feats: dict[str, Tensor] = {}
    # prompts sharing a memory width advance together as one (B, k, d) block
    groups: dict[int, list[SourcePromptSet]] = {}
    for ps in prompt_sets:
        groups.setdefault(ps.d_mem, []).append(ps)
    for group in groups.values():
        p = _stack_prompt_tokens(group, cache.batch_size)
        for layer in range(config.n_layers):
            p = _phase2_layer(config, params, layer, p, group, cache)
        p = B.ln(params, "ln_f", p, config.ln_eps)
        for i, ps in enumerate(group):
            row = T.slice_axis(p, 1, i, i + 1)
            feats[ps.source_id] = T.reshape(row, (cache.batch_size, config.d_model))
    return cache, feats


def predict_source(features, prompt_set: SourcePromptSet, apply_softmax: bool = True):
    """Local head on prompt features: W p + b, optionally exp-normalized.

    The averaged-probability ensemble uses the softmaxed form; the
    distance-weighted variant consumes raw logits.
    """
    x = features if isinstance(features, Tensor) else T.constant(features)
    logits = T.bias_add(T.matmul(x, T.transpose(prompt_set.head_w, (1, 0))), prompt_set.head_b)
    if apply_softmax:
        return T.softmax(logits, axis=-1)
    return logits


# ---------------------------------------------------------------------------
# parameter averaging baseline
# ---------------------------------------------------------------------------

def average_prompts(prompt_sets) -> SourcePromptSet:
    """Elementwise mean of prompts, memories, and heads (ablation baseline)."""
    prompt_sets = list(prompt_sets)
    if not prompt_sets:
        raise CompositionError("cannot average an empty set of prompts")
    first = prompt_sets[0]
    for ps in prompt_sets[1:]:
        if not np.array_equal(ps.label_map, first.label_map):
            raise CompositionError(
                f"label maps differ between {first.source_id!r} and {ps.source_id!r}"
            )
        if ps.head_w.shape != first.head_w.shape:
            raise CompositionError("head shapes differ; cannot average")
        if ps.variant != first.variant:
            raise CompositionError("prompt variants differ; cannot average")
        if (ps.memory is None) != (first.memory is None) or (
            ps.memory is not None and ps.memory.shape != first.memory.shape
        ):
            raise CompositionError("memory shapes differ; cannot average")

    def mean(pick):
        return T.constant(np.mean([pick(ps).data for ps in prompt_sets], axis=0))

    return SourcePromptSet(
        source_id="avg(" + ",".join(ps.source_id for ps in prompt_sets) + ")",
        variant=first.variant,
        prompt=mean(lambda ps: ps.prompt),
        memory=None if first.memory is None else mean(lambda ps: ps.memory),
        head_w=mean(lambda ps: ps.head_w),
        head_b=mean(lambda ps: ps.head_b),
        label_map=first.label_map.copy(),
        backbone_fingerprint=first.backbone_fingerprint,
    )


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def _flops_block(config: BackboneConfig, n_q: int, n_kv: int) -> float:
    """Matmul-dominated cost of one block: projections, scores, values, MLP."""
    d, dm = config.d_model, config.d_mlp
    proj = 2.0 * d * d * (n_q + 2 * n_kv + n_q)        # q, k, v, output
    attn = 2.0 * 2.0 * n_q * n_kv * d                  # scores and weighted values
    mlp = 2.0 * 2.0 * n_q * d * dm
    return proj + attn + mlp


def flops_backbone(config: BackboneConfig) -> float:
    s = config.seq_len
    embed_cost = 2.0 * config.n_patches * config.patch_dim * config.d_model
    return embed_cost + config.n_layers * _flops_block(config, s, s)


def flops_composed(config: BackboneConfig, n_prompts: int, d_mem: int = DEFAULT_D_MEM) -> float:
    """Analytic cost of the two-phase pass: backbone plus a linear
    per-prompt term. A prompt projects only its own row and memory block
    (the backbone keys/values are cached from phase 1) and queries
    S + 1 + d_mem keys per layer."""
    d, dm = config.d_model, config.d_mlp
    n_keys = config.seq_len + 1 + d_mem
    proj = 2.0 * d * d * (1 + 2 * (1 + d_mem) + 1)   # q, own k/v rows, output
    attn = 2.0 * 2.0 * 1 * n_keys * d
    mlp = 2.0 * 2.0 * 1 * d * dm
    per_prompt = config.n_layers * (proj + attn + mlp)
    return flops_backbone(config) + n_prompts * per_prompt


def flops_naive(config: BackboneConfig, n_prompts: int, d_mem: int = DEFAULT_D_MEM) -> float:
    """Analytic cost of full self-attention over the concatenation; the
    quadratic score matrix makes this superlinear in the prompt count."""
    s = config.seq_len
    n_q = s + n_prompts
    n_kv = n_q + n_prompts * d_mem
    embed_cost = 2.0 * config.n_patches * config.patch_dim * config.d_model
    return embed_cost + config.n_layers * _flops_block(config, n_q, n_kv)


# ---------------------------------------------------------------------------
# prompt-set io
# ---------------------------------------------------------------------------

def save_prompt_set(path, ps: SourcePromptSet) -> str:
    """Single-file blob: JSON header + named tensor records. Returns the
    SHA-256 fingerprint of the tensor region."""
    meta = {
        "source_id": ps.source_id,
        "variant": ps.variant,
        "label_map": ps.label_map.tolist(),
        "backbone_fingerprint": ps.backbone_fingerprint,
    }
    arrays = ps.arrays()
    if ps.prototypes is not None:
        arrays = dict(arrays, **{"prototypes": ps.prototypes})
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in sorted(arrays):
            serialize.write_named(fh, name, arrays[name])
    return serialize.fingerprint(arrays)


def load_prompt_set(path) -> SourcePromptSet:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise FormatError(f"not a prompt-set blob: {path}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != _VERSION:
            raise FormatError(f"unsupported prompt-set version {version}")
        header_len = struct.unpack("<I", fh.read(4))[0]
        meta = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = dict(serialize.iter_named(fh))
    for need in ("prompt", "head/w", "head/b"):
        if need not in arrays:
            raise FormatError(f"prompt-set blob missing record {need!r}")
    return SourcePromptSet(
        source_id=meta["source_id"],
        variant=meta["variant"],
        prompt=T.constant(arrays["prompt"]),
        memory=T.constant(arrays["memory"]) if "memory" in arrays else None,
        head_w=T.constant(arrays["head/w"]),
        head_b=T.constant(arrays["head/b"]),
        label_map=np.asarray(meta["label_map"], dtype=np.int64),
        backbone_fingerprint=meta["backbone_fingerprint"],
        prototypes=arrays.get("prototypes"),
    )
