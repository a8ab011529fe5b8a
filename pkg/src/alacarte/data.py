"""Corpora and partitions: synthetic generation, CIFAR-binary io, sharding,
and episode construction for the incremental-learning scenarios.

The synthetic generator draws each class as a colored cell motif on a
coarse grid (cells align with backbone patches, so the task is learnable
at desk scale) and each domain as a global appearance shift: background
level, color cast, and noise strength. Same seed, same corpus, byte for
byte; train and test splits share class patterns but never noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, PartitionError

_SPLIT_CODES = {"train": 0, "test": 1, "val": 2}


@dataclass
class LabeledImageSet:
    """Byte images with global integer labels and an optional domain tag."""

    images: np.ndarray            # (N, H, W, C) uint8
    labels: np.ndarray            # (N,) int64 global class ids
    class_count: int
    split: str = "train"
    domains: np.ndarray | None = None   # (N,) int64, when the corpus has domains

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8, got {self.images.dtype}")
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images (N,H,W,C) and labels (N,) must align")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(
                f"labels outside [0, {self.class_count}): "
                f"{self.labels.min()}..{self.labels.max()}"
            )
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)
            if self.domains.shape != self.labels.shape:
                raise DataError("domains must align with labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices)
        return LabeledImageSet(
            images=self.images[idx],
            labels=self.labels[idx],
            class_count=self.class_count,
            split=self.split,
            domains=None if self.domains is None else self.domains[idx],
        )


@dataclass
class EpisodeSpec:
    """One member of a partition: indices into a parent set plus the local
    label space those indices cover."""

    kind: str                     # shard | class_episode | domain
    indices: np.ndarray
    label_map: np.ndarray         # sorted global class ids present

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.label_map = np.asarray(self.label_map, dtype=np.int64)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def take(self, ds: LabeledImageSet) -> LabeledImageSet:
        return ds.subset(self.indices)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _class_pattern(seed: int, cls: int, grid: int):
    """Deterministic per-class motif (boolean grid) and base color."""
    rng = np.random.default_rng([seed, 1009, cls])
    n_cells = grid * grid
    n_lit = max(3, n_cells // 3)
    lit = rng.choice(n_cells, size=n_lit, replace=False)
    motif = np.zeros(n_cells, dtype=bool)
    motif[lit] = True
    color = rng.uniform(0.35, 1.0, size=3)
    color /= color.max()
    return motif.reshape(grid, grid), color


def _domain_params(seed: int, dom: int):
    """Appearance shift for one domain; domain 0 is the neutral reference."""
    if dom == 0:
        return {"bg": 20.0, "cast": np.ones(3), "noise": 18.0}
    rng = np.random.default_rng([seed, 2003, dom])
    return {
        "bg": float(rng.uniform(0.0, 70.0)),
        "cast": rng.uniform(0.55, 1.0, size=3),
        "noise": float(rng.uniform(8.0, 40.0)),
    }


def gen_synthetic(n_classes: int, n_domains: int, samples_per_class: int,
                  image_size: int = 32, seed: int = 0, split: str = "train",
                  cell_grid: int = 4) -> LabeledImageSet:
    """Synthetic classification corpus with optional domain shifts.

    A class is a fixed colored motif on a cell_grid x cell_grid layout; a
    domain recolors and renoises the whole image. Samples cycle through
    domains so every (class, domain) pair is covered. Class patterns
    depend only on (seed, class), so train/test splits of the same seed
    share them while drawing independent noise.
    """
    if n_classes <= 0 or n_domains <= 0 or samples_per_class <= 0 or image_size <= 0:
        raise DataError("gen_synthetic sizes must be positive")
    if image_size % cell_grid != 0:
        raise DataError(f"image_size {image_size} not divisible by cell grid {cell_grid}")
    cell = image_size // cell_grid
    split_code = _SPLIT_CODES.get(split, 3)
    patterns = [_class_pattern(seed, c, cell_grid) for c in range(n_classes)]
    domains = [_domain_params(seed, d) for d in range(n_domains)]

    n = n_classes * samples_per_class
    images = np.empty((n, image_size, image_size, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    doms = np.empty(n, dtype=np.int64)
    i = 0
    for cls in range(n_classes):
        motif, color = patterns[cls]
        for s in range(samples_per_class):
            dom = s % n_domains
            dp = domains[dom]
            rng = np.random.default_rng([seed, split_code, cls, s])
            img = dp["bg"] + rng.normal(0.0, dp["noise"], size=(image_size, image_size, 3))
            strength = rng.uniform(105.0, 150.0)
            tint = color * dp["cast"] * strength
            mask = np.kron(motif, np.ones((cell, cell), dtype=bool))
            img[mask] += tint
            images[i] = np.clip(img, 0, 255).astype(np.uint8)
            labels[i] = cls
            doms[i] = dom
            i += 1
    order = np.random.default_rng([seed, split_code, 9973]).permutation(n)
    return LabeledImageSet(images[order], labels[order], n_classes, split=split,
                           domains=doms[order] if n_domains > 1 else None)


# ---------------------------------------------------------------------------
# CIFAR binary io
# ---------------------------------------------------------------------------

_CIFAR_IMG_BYTES = 3072  # 32*32*3, R then G then B planes


def load_cifar_binary(path, variant: str = "cifar10", class_count: int | None = None,
                      split: str = "train") -> LabeledImageSet:
    """Read the CIFAR binary layout: per record, 1 label byte (cifar10) or
    coarse+fine label bytes (cifar100, fine used), then 3072 plane-major
    image bytes."""
    if variant not in ("cifar10", "cifar100"):
        raise FormatError(f"unknown CIFAR variant {variant!r}")
    label_bytes = 1 if variant == "cifar10" else 2
    record = label_bytes + _CIFAR_IMG_BYTES
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"no CIFAR batch file at {path}") from None
    if len(raw) % record != 0:
        offset = (len(raw) // record) * record
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of record size "
            f"{record}; trailing partial record at byte {offset}"
        )
    n = len(raw) // record
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = buf[:, label_bytes - 1].astype(np.int64)   # fine label for cifar100
    planes = buf[:, label_bytes:].reshape(n, 3, 32, 32)
    images = np.ascontiguousarray(planes.transpose(0, 2, 3, 1))
    if class_count is None:
        class_count = 10 if variant == "cifar10" else 100
    return LabeledImageSet(images, labels, class_count, split=split)


def save_cifar_binary(path, ds: LabeledImageSet) -> None:
    """Write in the CIFAR-10 single-label binary layout (round-trip aid)."""
    if ds.images.shape[1:] != (32, 32, 3):
        raise FormatError("CIFAR layout requires 32x32x3 images")
    if ds.labels.max(initial=0) > 255:
        raise FormatError("CIFAR layout labels must fit one byte")
    n = len(ds)
    planes = ds.images.transpose(0, 3, 1, 2).reshape(n, _CIFAR_IMG_BYTES)
    out = np.empty((n, 1 + _CIFAR_IMG_BYTES), dtype=np.uint8)
    out[:, 0] = ds.labels.astype(np.uint8)
    out[:, 1:] = planes
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def shard_uniform(ds: LabeledImageSet, n_shards: int, seed: int = 0) -> list[EpisodeSpec]:
    """Disjoint shards of near-equal size (first |set| mod n get the extra
    sample), drawn by seeded permutation. Small shards may lack some
    classes; each shard's label map lists only the classes it holds."""
    if n_shards <= 0:
        raise PartitionError(f"n_shards must be positive, got {n_shards}")
    if n_shards > len(ds):
        raise PartitionError(f"cannot cut {len(ds)} samples into {n_shards} shards")
    perm = np.random.default_rng(seed).permutation(len(ds))
    chunks = np.array_split(perm, n_shards)
    return [
        EpisodeSpec("shard", idx, np.unique(ds.labels[idx]))
        for idx in chunks
    ]


def split_class_incremental(ds: LabeledImageSet, n_episodes: int) -> list[EpisodeSpec]:
    """Contiguous class blocks: episode e holds classes [e*k, (e+1)*k)."""
    if n_episodes <= 0 or ds.class_count % n_episodes != 0:
        raise PartitionError(
            f"class_count {ds.class_count} not divisible into {n_episodes} episodes"
        )
    per = ds.class_count // n_episodes
    episodes = []
    for e in range(n_episodes):
        classes = np.arange(e * per, (e + 1) * per)
        idx = np.flatnonzero(np.isin(ds.labels, classes))
        episodes.append(EpisodeSpec("class_episode", idx, classes))
    return episodes


def split_domains(ds: LabeledImageSet, train_domains) -> tuple[list[EpisodeSpec], EpisodeSpec]:
    """One episode per training domain (full shared class space each);
    samples from every other domain form the held-out test episode."""
    if ds.domains is None:
        raise PartitionError("dataset carries no domain labels")
    train_domains = [int(d) for d in train_domains]
    all_classes = np.arange(ds.class_count)
    episodes = []
    for d in train_domains:
        idx = np.flatnonzero(ds.domains == d)
        if idx.size == 0:
            raise PartitionError(f"domain {d} absent from dataset")
        episodes.append(EpisodeSpec("domain", idx, all_classes))
    held = np.flatnonzero(~np.isin(ds.domains, train_domains))
    return episodes, EpisodeSpec("domain", held, all_classes)
