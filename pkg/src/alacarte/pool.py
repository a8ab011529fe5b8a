"""Prompt pool: a growable library of per-source prompt sets.

Backed by a directory (manifest.json plus one blob per source) or kept
purely in memory. Adding, removing, and predicting over an arbitrary
subset are all independent operations; every read of a source goes
through `get`, which records the access so tests can verify that a
subset prediction never touches sources outside the subset.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

from . import prompts as P
from .backbone import BackboneConfig, BackboneParams
from .errors import (
    CompositionError,
    FormatError,
    PoolError,
    SelectionError,
    SourceNotFoundError,
    StalePromptError,
)

_MANIFEST = "manifest.json"
_FORMAT = "alacarte-pool-v1"


def _blob_name(source_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", source_id)[:48]
    tag = hashlib.sha256(source_id.encode("utf-8")).hexdigest()[:8]
    return f"{safe}.{tag}.blob"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class PromptPool:
    """Keyed store of SourcePromptSets sharing one frozen backbone."""

    def __init__(self, backbone_fingerprint: str, n_classes: int,
                 root: str | Path | None = None, name: str = "pool",
                 k_default: int = 20, beta_default: float = 0.1):
        if n_classes < 1:
            raise PoolError(f"pool needs n_classes >= 1, got {n_classes}")
        self.name = name
        self.backbone_fingerprint = backbone_fingerprint
        self.n_classes = int(n_classes)
        self.k_default = int(k_default)
        self.beta_default = float(beta_default)
        self.root = Path(root) if root is not None else None
        self._entries: dict[str, dict] = {}
        self._loaded: dict[str, P.SourcePromptSet] = {}
        self.access_log: list[str] = []
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._write_manifest()

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, root, params: BackboneParams, n_classes: int, name: str = "pool",
               k_default: int = 20, beta_default: float = 0.1) -> "PromptPool":
        return cls(params.fingerprint(), n_classes, root=root, name=name,
                   k_default=k_default, beta_default=beta_default)

    @classmethod
    def in_memory(cls, params: BackboneParams, n_classes: int, name: str = "pool") -> "PromptPool":
        return cls(params.fingerprint(), n_classes, root=None, name=name)

    @classmethod
    def open(cls, root) -> "PromptPool":
        root = Path(root)
        mpath = root / _MANIFEST
        if not mpath.exists():
            raise PoolError(f"no pool manifest at {mpath}")
        meta = json.loads(mpath.read_text())
        if meta.get("format") != _FORMAT:
            raise FormatError(f"unrecognized pool format {meta.get('format')!r}")
        pool = cls.__new__(cls)
        pool.name = meta["name"]
        pool.backbone_fingerprint = meta["backbone_fingerprint"]
        pool.n_classes = int(meta["n_classes"])
        pool.k_default = int(meta["defaults"]["k"])
        pool.beta_default = float(meta["defaults"]["beta"])
        pool.root = root
        pool._entries = dict(meta["sources"])
        pool._loaded = {}
        pool.access_log = []
        return pool

    # -- manifest ----------------------------------------------------------

    def manifest_dict(self) -> dict:
        return {
            "format": _FORMAT,
            "name": self.name,
            "backbone_fingerprint": self.backbone_fingerprint,
            "n_classes": self.n_classes,
            "defaults": {"k": self.k_default, "beta": self.beta_default},
            "sources": self._entries,
        }

    def _write_manifest(self) -> None:
        if self.root is None:
            return
        payload = json.dumps(self.manifest_dict(), sort_keys=True, indent=1).encode("utf-8")
        _atomic_write(self.root / _MANIFEST, payload)

    # -- membership --------------------------------------------------------

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, source_id: str) -> bool:
        return source_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, ps: P.SourcePromptSet) -> None:
        """Register one source. Its labels must fit the pool's global space
        and its fingerprint must match the pool's backbone."""
        if ps.source_id in self._entries:
            raise PoolError(f"source {ps.source_id!r} already in pool")
        if ps.backbone_fingerprint != self.backbone_fingerprint:
            raise StalePromptError(
                f"source {ps.source_id!r} was trained against a different backbone"
            )
        if ps.label_map.max() >= self.n_classes or ps.label_map.min() < 0:
            raise PoolError(
                f"source {ps.source_id!r} labels {ps.label_map.tolist()} exceed "
                f"global space of {self.n_classes}"
            )
        entry = {
            "variant": ps.variant,
            "label_map": ps.label_map.tolist(),
            "has_prototypes": ps.prototypes is not None,
        }
        if self.root is not None:
            fname = _blob_name(ps.source_id)
            tmp = self.root / (fname + ".tmp")
            fp = P.save_prompt_set(tmp, ps)
            os.replace(tmp, self.root / fname)
            entry["file"] = fname
            entry["fingerprint"] = fp
        else:
            self._loaded[ps.source_id] = ps
        self._entries[ps.source_id] = entry
        self._write_manifest()

    def get(self, source_id: str) -> P.SourcePromptSet:
        """Fetch one source (lazy-loading its blob) and log the access."""
        if source_id not in self._entries:
            raise SourceNotFoundError(f"no source {source_id!r} in pool {self.name!r}")
        self.access_log.append(source_id)
        if source_id not in self._loaded:
            fname = self._entries[source_id]["file"]
            self._loaded[source_id] = P.load_prompt_set(self.root / fname)
        return self._loaded[source_id]

    def forget(self, source_id: str) -> None:
        """Drop one source: its blob is deleted and the manifest shrinks.
        The remaining pool is byte-identical to one never containing it."""
        if source_id not in self._entries:
            raise SourceNotFoundError(f"no source {source_id!r} in pool {self.name!r}")
        entry = self._entries.pop(source_id)
        self._loaded.pop(source_id, None)
        if self.root is not None and "file" in entry:
            try:
                os.remove(self.root / entry["file"])
            except FileNotFoundError:
                pass
        self._write_manifest()

    def reset_access_log(self) -> None:
        self.access_log = []

    def touched_source_ids(self) -> list[str]:
        """Distinct sources read since the last reset, in first-read order."""
        seen: list[str] = []
        for sid in self.access_log:
            if sid not in seen:
                seen.append(sid)
        return seen


# ---------------------------------------------------------------------------
# subset prediction
# ---------------------------------------------------------------------------

def _resolve(pool: PromptPool, subset) -> list[P.SourcePromptSet]:
    subset = list(subset)
    if not subset:
        raise SelectionError("prediction needs a non-empty subset of sources")
    if len(set(subset)) != len(subset):
        raise SelectionError(f"subset contains duplicate source ids: {subset}")
    return [pool.get(sid) for sid in subset]


def scatter_matrix(values: np.ndarray, label_map: np.ndarray, n_classes: int,
                   fill: float = 0.0) -> np.ndarray:
    """Place per-local-class columns at their global class positions."""
    out = np.full((values.shape[0], n_classes), fill, dtype=np.float64)
    out[:, np.asarray(label_map, dtype=np.int64)] = values
    return out


def apt_predict(config: BackboneConfig, params: BackboneParams, images: np.ndarray,
                pool: PromptPool, subset) -> np.ndarray:
    """Average of per-source class distributions over the chosen subset.

    One shared backbone pass serves every selected prompt; each source's
    softmax is scattered into the global label space before the mean, so
    the result is a distribution whose rows sum to 1 whenever all sources
    cover the same classes. Order of the subset does not matter.
    """
    sets = _resolve(pool, subset)
    _, feats = P.composed_forward(config, params, images, sets)
    acc = np.zeros((images.shape[0], pool.n_classes), dtype=np.float64)
    for ps in sets:
        probs = P.predict_source(feats[ps.source_id], ps, apply_softmax=True).data
        acc += scatter_matrix(probs, ps.label_map, pool.n_classes)
    return acc / len(sets)


def majority_vote(config: BackboneConfig, params: BackboneParams, images: np.ndarray,
                  pool: PromptPool, subset) -> np.ndarray:
    """Each source casts one vote (its argmax, mapped to global labels);
    plurality wins and ties resolve to the lowest class index."""
    sets = _resolve(pool, subset)
    _, feats = P.composed_forward(config, params, images, sets)
    counts = np.zeros((images.shape[0], pool.n_classes), dtype=np.int64)
    for ps in sets:
        probs = P.predict_source(feats[ps.source_id], ps, apply_softmax=True).data
        picks = ps.label_map[np.argmax(probs, axis=1)]
        counts[np.arange(images.shape[0]), picks] += 1
    return np.argmax(counts, axis=1)


def cil_predict(config: BackboneConfig, params: BackboneParams, images: np.ndarray,
                pool: PromptPool, subset, weights: np.ndarray | None = None) -> np.ndarray:
    """Class-incremental prediction: episodes own disjoint label blocks, so
    raw logits concatenate into one global vector and the argmax decides.

    `weights`, when given, scales each episode's logits per sample
    ((N, |subset|), the distance-weighted path)."""
    sets = _resolve(pool, subset)
    seen: set[int] = set()
    for ps in sets:
        block = set(int(c) for c in ps.label_map)
        overlap = seen & block
        if overlap:
            raise CompositionError(
                f"class-incremental episodes must be disjoint; classes "
                f"{sorted(overlap)} appear twice"
            )
        seen |= block
    _, feats = P.composed_forward(config, params, images, sets)
    pooled = np.full((images.shape[0], pool.n_classes), -np.inf, dtype=np.float64)
    for j, ps in enumerate(sets):
        logits = P.predict_source(feats[ps.source_id], ps, apply_softmax=False).data
        if weights is not None:
            logits = weights[:, j:j + 1] * logits
        pooled[:, ps.label_map] = logits
    return np.argmax(pooled, axis=1)


def forget_source(pool: PromptPool, source_id: str) -> PromptPool:
    """Remove one source's contribution entirely; later predictions over
    any subset behave as if it had never been added."""
    pool.forget(source_id)
    return pool


def ensemble_finetuned(models, images: np.ndarray, n_classes: int) -> np.ndarray:
    """Mean class distribution over separately finetuned full models
    (the expensive reference composition with no shared backbone)."""
    models = list(models)
    if not models:
        raise SelectionError("ensemble needs at least one model")
    acc = np.zeros((images.shape[0], n_classes), dtype=np.float64)
    for m in models:
        acc += scatter_matrix(m.predict_probs(images), m.label_map, n_classes)
    return acc / len(models)
