"""Experiment protocols: shard sweeps, forgetting curves, incremental
learning runs, and composition benchmarks.

Each run_* function takes in-memory data plus a frozen backbone and
returns an ExperimentReport whose deterministic columns depend only on
(config, seeds). Per-source training jobs inside a sweep are independent
and individually seeded, so a worker pool changes wall time but never
results.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import backbone as B
from . import data as D
from . import pool as PL
from . import prompts as P
from . import training as TR
from . import weighting as W
from .errors import PoolError
from .report import ExperimentReport

DEFAULT_SHARD_COUNTS = (2, 4, 8)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float((np.asarray(pred) == labels).mean())


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - t0) * 1000.0


def _source_seed(seed: int, index: int) -> int:
    return seed * 1000 + index


def _train_prompts(config, params, train: D.LabeledImageSet, episodes, seed: int,
                   epochs: int, label_map, workers: int = 1, prefix: str = "shard",
                   batch_size: int = 8, augment: bool = False):
    """Train one prompt set per episode, each on its own slice only."""
    def job(i_ep):
        i, ep = i_ep
        sub = ep.take(train)
        tc = TR.TrainConfig(regime="prompt", epochs=epochs, batch_size=batch_size,
                            seed=_source_seed(seed, i), augment=augment)
        lm = label_map if label_map is not None else ep.label_map
        return TR.train_prompt(config, params, sub.images, sub.labels, lm, tc,
                               source_id=f"{prefix}{i}")

    jobs = list(enumerate(episodes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(job, jobs))
    return [job(j) for j in jobs]


def _mean_softmax_from_feats(feats: dict, sets, n_classes: int) -> np.ndarray:
    acc = np.zeros((next(iter(feats.values())).shape[0], n_classes), dtype=np.float64)
    for ps in sets:
        probs = P.predict_source(feats[ps.source_id], ps, apply_softmax=True).data
        acc += PL.scatter_matrix(probs, ps.label_map, n_classes)
    return acc / len(sets)


# ---------------------------------------------------------------------------
# shard sweep
# ---------------------------------------------------------------------------

def run_shard_sweep(config: B.BackboneConfig, params: B.BackboneParams,
                    train: D.LabeledImageSet, test: D.LabeledImageSet,
                    shard_counts=DEFAULT_SHARD_COUNTS, seeds=DEFAULT_SEEDS,
                    epochs: int = TR.DEFAULT_PROMPT_EPOCHS,
                    finetune_epochs: int = 10, include_finetuned: bool = True,
                    workers: int = 1, augment: bool = False) -> ExperimentReport:
    """Accuracy versus number of shards, against the single-model upper bound.

    For each (seed, n): partition the training set uniformly, tune one
    prompt per shard in isolation, then evaluate subset composition
    (mean-distribution, majority vote), the parameter-average and unmasked
    concatenation ablations, and optionally an ensemble of per-shard
    finetuned models. The n=1 run is the upper bound ("paragon"); its rows
    are recorded under both names so gaps read directly off the report.
    """
    n_classes = int(train.labels.max()) + 1
    global_map = np.arange(n_classes)
    counts = sorted(set(int(n) for n in shard_counts) | {1})
    rep = ExperimentReport("shard_sweep", {
        "shard_counts": counts, "seeds": list(seeds), "epochs": epochs,
        "augment": augment,
        "finetune_epochs": finetune_epochs if include_finetuned else None,
        "n_train": train.images.shape[0], "n_test": test.images.shape[0],
        "n_classes": n_classes,
    }, setting_name="n_shards")

    for seed in seeds:
        for n in counts:
            episodes = D.shard_uniform(train, n, seed=seed)
            sets = _train_prompts(config, params, train, episodes, seed, epochs,
                                  global_map, workers=workers, augment=augment)
            pool = PL.PromptPool.in_memory(params, n_classes)
            for ps in sets:
                pool.add(ps)
            ids = pool.ids()

            (probs, ms) = _timed(lambda: PL.apt_predict(config, params, test.images, pool, ids))
            acc = _accuracy(probs.argmax(axis=1), test.labels)
            rep.add(seed, n, "apt", acc, ms, P.flops_composed(config, n))
            if n == 1:
                rep.add(seed, n, "paragon", acc, ms, P.flops_composed(config, 1))
                continue

            votes, ms = _timed(lambda: PL.majority_vote(config, params, test.images, pool, ids))
            rep.add(seed, n, "majority", _accuracy(votes, test.labels), ms,
                    P.flops_composed(config, n))

            avg = P.average_prompts(sets)
            (_, feats), ms = _timed(lambda: P.composed_forward(config, params, test.images, [avg]))
            probs = P.predict_source(feats[avg.source_id], avg).data
            rep.add(seed, n, "param_average", _accuracy(probs.argmax(axis=1), test.labels),
                    ms, P.flops_composed(config, 1))

            (_, feats), ms = _timed(lambda: P.naive_concat_forward(config, params, test.images, sets))
            mean = _mean_softmax_from_feats(feats, sets, n_classes)
            rep.add(seed, n, "naive_concat", _accuracy(mean.argmax(axis=1), test.labels),
                    ms, P.flops_naive(config, n))

            if include_finetuned:
                models = []
                for i, ep in enumerate(episodes):
                    sub = ep.take(train)
                    tc = TR.TrainConfig(regime="finetune", epochs=finetune_epochs,
                                        batch_size=min(16, sub.images.shape[0]),
                                        seed=_source_seed(seed, i), augment=augment)
                    models.append(TR.finetune_full(config, params, sub.images, sub.labels,
                                                   label_map=global_map, tc=tc))
                mean, ms = _timed(lambda: PL.ensemble_finetuned(models, test.images, n_classes))
                rep.add(seed, n, "finetuned_ensemble", _accuracy(mean.argmax(axis=1), test.labels),
                        ms, n * P.flops_backbone(config))
    return rep


def paragon_gap(rep: ExperimentReport, lo: int = 2, hi: int = 8) -> float:
    """Mean (paragon - composed) accuracy over seeds and shard counts in [lo, hi]."""
    gaps = []
    for row in rep.rows:
        if row.method != "apt" or not (lo <= int(row.setting) <= hi):
            continue
        paragon = [r.accuracy for r in rep.rows
                   if r.method == "paragon" and r.seed == row.seed]
        if paragon:
            gaps.append(paragon[0] - row.accuracy)
    if not gaps:
        raise PoolError(f"no sweep rows with {lo} <= n_shards <= {hi}")
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# forgetting curve
# ---------------------------------------------------------------------------

def build_shard_pool(config, params, train: D.LabeledImageSet, n_sources: int,
                     root, seed: int = 0, epochs: int = TR.DEFAULT_PROMPT_EPOCHS,
                     workers: int = 1, with_prototypes: bool = False,
                     k_protos: int = W.DEFAULT_K) -> PL.PromptPool:
    """Shard the training set and persist one trained prompt per shard."""
    n_classes = int(train.labels.max()) + 1
    episodes = D.shard_uniform(train, n_sources, seed=seed)
    sets = _train_prompts(config, params, train, episodes, seed, epochs,
                          np.arange(n_classes), workers=workers)
    pool = PL.PromptPool.create(root, params, n_classes)
    for ep, ps in zip(episodes, sets):
        if with_prototypes:
            sub = ep.take(train)
            protos = W.build_prototypes(config, params, sub.images, ps.source_id,
                                        k=min(k_protos, sub.images.shape[0]),
                                        seed=seed)
            W.attach_prototypes(ps, protos)
        pool.add(ps)
    return pool


def run_forget_curve(config, params, pool: PL.PromptPool, test: D.LabeledImageSet,
                     removal_seed: int = 0, verify: bool = True) -> ExperimentReport:
    """Remove sources one at a time, re-evaluating the remaining subset.

    After each removal the source's blob must be gone from the pool
    directory; with `verify` the surviving pool is re-opened from disk and
    its predictions checked to match exactly (removal leaves no residue).
    """
    ids = pool.ids()
    order = [ids[i] for i in np.random.default_rng(removal_seed).permutation(len(ids))]
    rep = ExperimentReport("forget_curve", {
        "n_sources": len(ids), "removal_seed": removal_seed,
        "n_test": test.images.shape[0],
    }, setting_name="n_remaining")

    def eval_remaining(p: PL.PromptPool) -> np.ndarray:
        return PL.apt_predict(config, params, test.images, p, p.ids()).argmax(axis=1)

    pred, ms = _timed(lambda: eval_remaining(pool))
    base_err = 1.0 - _accuracy(pred, test.labels)
    rep.add(removal_seed, len(ids), "apt", 1.0 - base_err, ms,
            P.flops_composed(config, len(ids)))
    for victim in order[:-1]:
        entry = pool._entries[victim]
        PL.forget_source(pool, victim)
        if pool.root is not None and "file" in entry:
            gone = not (pool.root / entry["file"]).exists()
            if not gone:
                raise PoolError(f"blob for {victim!r} still on disk after forget")
        pred, ms = _timed(lambda: eval_remaining(pool))
        if verify and pool.root is not None:
            fresh = PL.PromptPool.open(pool.root)
            if not np.array_equal(pred, eval_remaining(fresh)):
                raise PoolError("forgetting left residue: fresh pool predicts differently")
        rep.add(removal_seed, len(pool), "apt", _accuracy(pred, test.labels), ms,
                P.flops_composed(config, len(pool)))
    return rep


def error_increase(rep: ExperimentReport) -> list[tuple[int, float]]:
    """(n_remaining, error - starting error) per step of a forgetting run."""
    rows = [r for r in rep.rows if r.method == "apt"]
    rows.sort(key=lambda r: -int(r.setting))
    base = 1.0 - rows[0].accuracy
    return [(int(r.setting), (1.0 - r.accuracy) - base) for r in rows]


# ---------------------------------------------------------------------------
# class-incremental / domain-incremental
# ---------------------------------------------------------------------------

def run_cil(config, params, train: D.LabeledImageSet, test: D.LabeledImageSet,
            n_episodes: int, seeds=DEFAULT_SEEDS, methods=("apt", "apt_w"),
            epochs: int = TR.DEFAULT_PROMPT_EPOCHS, k_protos: int = 5,
            beta: float = W.DEFAULT_BETA, workers: int = 1) -> ExperimentReport:
    """Episodes own disjoint class blocks; prompts never see other episodes.

    `apt` concatenates raw episode logits; `apt_w` scales them by
    prototype-distance weights first. With one episode both reduce to
    plain prompt tuning.
    """
    n_classes = int(train.labels.max()) + 1
    rep = ExperimentReport("cil", {
        "n_episodes": n_episodes, "seeds": list(seeds), "epochs": epochs,
        "methods": list(methods), "k_protos": k_protos, "beta": beta,
        "n_classes": n_classes,
    }, setting_name="n_episodes")
    episodes = D.split_class_incremental(train, n_episodes)
    for seed in seeds:
        sets = _train_prompts(config, params, train, episodes, seed, epochs,
                              label_map=None, workers=workers, prefix="episode")
        pool = PL.PromptPool.in_memory(params, n_classes)
        for ep, ps in zip(episodes, sets):
            sub = ep.take(train)
            protos = W.build_prototypes(config, params, sub.images, ps.source_id,
                                        k=min(k_protos, sub.images.shape[0]), seed=seed)
            W.attach_prototypes(ps, protos)
            pool.add(ps)
        ids = pool.ids()
        if "apt" in methods:
            pred, ms = _timed(lambda: PL.cil_predict(config, params, test.images, pool, ids))
            rep.add(seed, n_episodes, "apt", _accuracy(pred, test.labels), ms,
                    P.flops_composed(config, n_episodes))
        if "apt_w" in methods:
            pooled, ms = _timed(lambda: W.aptw_predict(config, params, test.images, pool,
                                                       ids, mode="cil", beta=beta))
            rep.add(seed, n_episodes, "apt_w", _accuracy(pooled.argmax(axis=1), test.labels),
                    ms, P.flops_composed(config, n_episodes))
    return rep


def run_dil(config, params, train: D.LabeledImageSet, test: D.LabeledImageSet,
            train_domains, seeds=DEFAULT_SEEDS, methods=("apt", "apt_w"),
            epochs: int = TR.DEFAULT_PROMPT_EPOCHS, k_protos: int = 5,
            beta: float = W.DEFAULT_BETA, workers: int = 1) -> ExperimentReport:
    """One prompt per training domain, evaluated on held-out domains.

    All sources share the label space. `apt` averages raw logits
    uniformly; `apt_w` weights them by prototype distance, so beta=0
    makes the two argmax-identical.
    """
    n_classes = int(train.labels.max()) + 1
    episodes, _ = D.split_domains(train, train_domains)
    _, heldout = D.split_domains(test, train_domains)
    eval_set = heldout.take(test)
    global_map = np.arange(n_classes)
    rep = ExperimentReport("dil", {
        "train_domains": list(train_domains), "seeds": list(seeds),
        "epochs": epochs, "methods": list(methods), "k_protos": k_protos,
        "beta": beta, "n_eval": eval_set.images.shape[0],
    }, setting_name="n_domains")
    n_dom = len(episodes)
    for seed in seeds:
        sets = _train_prompts(config, params, train, episodes, seed, epochs,
                              global_map, workers=workers, prefix="domain")
        pool = PL.PromptPool.in_memory(params, n_classes)
        for ep, ps in zip(episodes, sets):
            sub = ep.take(train)
            protos = W.build_prototypes(config, params, sub.images, ps.source_id,
                                        k=min(k_protos, sub.images.shape[0]), seed=seed)
            W.attach_prototypes(ps, protos)
            pool.add(ps)
        ids = pool.ids()
        if "apt" in methods:
            def uniform_pool():
                return W.aptw_predict(config, params, eval_set.images, pool, ids,
                                      mode="dil", beta=0.0)
            pooled, ms = _timed(uniform_pool)
            rep.add(seed, n_dom, "apt", _accuracy(pooled.argmax(axis=1), eval_set.labels),
                    ms, P.flops_composed(config, n_dom))
        if "apt_w" in methods:
            pooled, ms = _timed(lambda: W.aptw_predict(config, params, eval_set.images,
                                                       pool, ids, mode="dil", beta=beta))
            rep.add(seed, n_dom, "apt_w", _accuracy(pooled.argmax(axis=1), eval_set.labels),
                    ms, P.flops_composed(config, n_dom))
    return rep


# ---------------------------------------------------------------------------
# composition benchmark
# ---------------------------------------------------------------------------

def fit_linear_r2(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept, and R^2 of y against x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - (resid ** 2).sum() / ss_tot
    return float(slope), float(intercept), float(r2)


def run_bench(config, params, sizes=(0, 1, 2, 4, 8, 16, 32), batch: int = 8,
              repeats: int = 3, seed: int = 0) -> ExperimentReport:
    """Wall time and analytic cost of the three composition strategies.

    `composed`: shared backbone pass plus per-prompt cross-attention.
    `naive`: one concatenated self-attention pass over all prompts.
    `per_model`: the backbone run once per source (model ensembling).
    Accuracy is not meaningful here; rows carry 0.
    """
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(batch, config.image_size, config.image_size, 3),
                          dtype=np.uint8)
    fp = params.fingerprint()
    rep = ExperimentReport("bench_compose", {
        "sizes": list(sizes), "batch": batch, "repeats": repeats,
    }, setting_name="n_prompts")

    def best_of(fn):
        times = []
        for _ in range(repeats):
            _, ms = _timed(fn)
            times.append(ms)
        return min(times)

    for k in sizes:
        sets = [P.init_prompt_set(config, f"bench{i}", [0], fp, seed=i) for i in range(k)]
        if k == 0:
            ms = best_of(lambda: B.forward_backbone(config, params, images))
            rep.add(seed, 0, "composed", 0.0, ms, P.flops_backbone(config))
            rep.add(seed, 0, "naive", 0.0, ms, P.flops_backbone(config))
            rep.add(seed, 0, "per_model", 0.0, ms, P.flops_backbone(config))
            continue
        rep.add(seed, k, "composed", 0.0,
                best_of(lambda: P.composed_forward(config, params, images, sets)),
                P.flops_composed(config, k))
        rep.add(seed, k, "naive", 0.0,
                best_of(lambda: P.naive_concat_forward(config, params, images, sets)),
                P.flops_naive(config, k))

        def per_model():
            for _ in range(k):
                B.forward_backbone(config, params, images)
        rep.add(seed, k, "per_model", 0.0, best_of(per_model),
                k * P.flops_backbone(config))
    return rep


def bench_linearity(rep: ExperimentReport) -> dict:
    """R^2 of the composed FLOP increments against subset size."""
    rows = [r for r in rep.rows if r.method == "composed" and int(r.setting) >= 1]
    rows.sort(key=lambda r: int(r.setting))
    ks = [int(r.setting) for r in rows]
    base = [r.flops for r in rep.rows if r.method == "composed" and int(r.setting) == 0]
    if not base:
        raise PoolError("bench report lacks the k=0 baseline row")
    deltas = [r.flops - base[0] for r in rows]
    slope, intercept, r2 = fit_linear_r2(ks, deltas)
    return {"slope": slope, "intercept": intercept, "r2": r2, "k": ks}
