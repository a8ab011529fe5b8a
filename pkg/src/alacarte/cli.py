"""Command-line surface.

Verbs: pretrain, train-prompt, compose, eval, shard-sweep, forget-curve,
cil, dil, bench, pool add|rm|ls. A single JSON config file describes the
backbone, the data source, and per-scenario knobs; every section has
defaults so most verbs run bare. Exit codes: 0 ok, 2 bad configuration,
3 data problem, 4 pool or fingerprint problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone as B
from . import data as D
from . import harness as H
from . import pool as PL
from . import prompts as P
from . import tensor as T
from . import training as TR
from . import weighting as W
from .errors import (
    AlacarteError,
    ConfigError,
    DataError,
    LabelError,
    PoolError,
)

_SECTIONS = {"backbone", "data", "pretrain", "prompt", "sweep", "forget",
             "cil", "dil", "bench"}

_DEFAULTS = {
    "data": {"kind": "synthetic", "n_classes": 10, "n_domains": 1,
             "samples_per_class": 80, "test_samples_per_class": 20,
             "image_size": 32, "seed": 7, "path": None},
    "pretrain": {"epochs": 80, "batch_size": 32, "base_lr": 0.3, "seed": 0},
    "prompt": {"epochs": 20, "batch_size": 8, "variant": "deep", "d_mem": 5},
    "sweep": {"shard_counts": [2, 4, 8], "seeds": [0, 1, 2, 3, 4],
              "finetune_epochs": 8, "include_finetuned": True},
    "forget": {"n_sources": 8, "removal_seed": 0},
    "cil": {"n_episodes": 5, "seeds": [0, 1, 2, 3, 4], "k_protos": 5, "beta": 0.1},
    "dil": {"train_domains": [0, 1], "seeds": [0, 1, 2, 3, 4],
            "k_protos": 5, "beta": 0.1},
    "bench": {"sizes": [0, 1, 2, 4, 8, 16, 32], "batch": 8, "repeats": 3},
}


def load_config(path: str | None) -> dict:
    cfg = {k: dict(v) for k, v in _DEFAULTS.items()}
    cfg["backbone"] = {}
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, body in raw.items():
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        if section == "backbone":
            cfg["backbone"] = dict(body)
            continue
        bad = set(body) - set(cfg[section])
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(bad)}")
        cfg[section].update(body)
    return cfg


def _backbone_config(cfg: dict) -> B.BackboneConfig:
    body = dict(cfg["backbone"])
    if cfg["data"]["kind"] == "synthetic":
        body.setdefault("image_size", cfg["data"]["image_size"])
    return B.BackboneConfig.from_dict(body) if body else B.BackboneConfig()


def _load_data(cfg: dict) -> tuple[D.LabeledImageSet, D.LabeledImageSet]:
    d = cfg["data"]
    if d["kind"] == "synthetic":
        train = D.gen_synthetic(d["n_classes"], d["n_domains"], d["samples_per_class"],
                                image_size=d["image_size"], seed=d["seed"], split="train")
        test = D.gen_synthetic(d["n_classes"], d["n_domains"], d["test_samples_per_class"],
                               image_size=d["image_size"], seed=d["seed"], split="test")
        return train, test
    if d["kind"] in ("cifar10", "cifar100"):
        if not d["path"]:
            raise ConfigError(f"data.kind {d['kind']!r} needs data.path")
        root = Path(d["path"])
        train = D.load_cifar_binary(root / "train.bin", variant=d["kind"])
        test = D.load_cifar_binary(root / "test.bin", variant=d["kind"])
        return train, test
    raise ConfigError(f"unknown data.kind {d['kind']!r}")


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_backbone(args) -> tuple[B.BackboneConfig, B.BackboneParams]:
    path = args.backbone or str(_out_dir(args) / "backbone.ckpt")
    if not Path(path).exists():
        raise ConfigError(f"no backbone checkpoint at {path}; run `pretrain` first")
    config, params = B.load_backbone(path)
    params.freeze()
    return config, params


def _sweep_seeds(args, listed) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    return list(listed)


# ---------------------------------------------------------------------------
# verb implementations
# ---------------------------------------------------------------------------

def cmd_pretrain(args, cfg) -> int:
    config = _backbone_config(cfg)
    train, _ = _load_data(cfg)
    pt = cfg["pretrain"]
    seed = args.seed if args.seed is not None else pt["seed"]
    params = B.pretrain_proxy(config, train.images, train.labels,
                              epochs=pt["epochs"], seed=seed,
                              batch_size=pt["batch_size"], base_lr=pt["base_lr"])
    out = _out_dir(args) / "backbone.ckpt"
    B.save_backbone(out, config, params)
    print(f"checkpoint: {out}")
    print(f"fingerprint: {params.fingerprint()}")
    return 0


def cmd_train_prompt(args, cfg) -> int:
    config, params = _load_backbone(args)
    train, test = _load_data(cfg)
    pr = cfg["prompt"]
    seed = args.seed if args.seed is not None else 0
    if args.shards > 1:
        episodes = D.shard_uniform(train, args.shards, seed=seed)
        if not (0 <= args.shard_index < args.shards):
            raise ConfigError(f"shard index {args.shard_index} outside 0..{args.shards - 1}")
        train = episodes[args.shard_index].take(train)
    n_classes = int(train.labels.max()) + 1
    tc = TR.TrainConfig(regime="prompt", variant=pr["variant"], d_mem=pr["d_mem"],
                        epochs=pr["epochs"], batch_size=pr["batch_size"], seed=seed)
    ps = TR.train_prompt(config, params, train.images, train.labels,
                         np.arange(n_classes), tc, source_id=args.source_id)
    protos = W.build_prototypes(config, params, train.images, args.source_id,
                                k=min(W.DEFAULT_K, train.images.shape[0]), seed=seed)
    W.attach_prototypes(ps, protos)
    out = _out_dir(args) / f"{args.source_id}.blob"
    fp = P.save_prompt_set(out, ps)
    _, feats = P.composed_forward(config, params, test.images, [ps])
    probs = P.predict_source(feats[ps.source_id], ps).data
    acc = float((probs.argmax(axis=1) == test.labels).mean())
    print(f"blob: {out}")
    print(f"fingerprint: {fp}")
    print(f"test accuracy: {acc:.4f}")
    return 0


def _open_pool(args) -> PL.PromptPool:
    if not args.pool:
        raise ConfigError("this verb needs --pool <dir>")
    return PL.PromptPool.open(args.pool)


def cmd_compose(args, cfg) -> int:
    config, params = _load_backbone(args)
    _, test = _load_data(cfg)
    pool = _open_pool(args)
    subset = args.subset.split(",") if args.subset else pool.ids()
    probs = PL.apt_predict(config, params, test.images, pool, subset)
    pred = probs.argmax(axis=1)
    acc = float((pred == test.labels).mean())
    out = _out_dir(args) / "predictions.csv"
    with open(out, "w") as fh:
        fh.write("index,predicted,label\n")
        for i, (p, y) in enumerate(zip(pred, test.labels)):
            fh.write(f"{i},{p},{y}\n")
    print(f"subset: {','.join(subset)}")
    print(f"accuracy: {acc:.4f}")
    print(f"predictions: {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    config, params = _load_backbone(args)
    _, test = _load_data(cfg)
    ps = P.load_prompt_set(args.blob)
    P.check_fingerprints(params, [ps])
    _, feats = P.composed_forward(config, params, test.images, [ps])
    probs = P.predict_source(feats[ps.source_id], ps).data
    local = probs.argmax(axis=1)
    pred = ps.label_map[local]
    acc = float((pred == test.labels).mean())
    print(f"source: {ps.source_id}")
    print(f"accuracy: {acc:.4f}")
    return 0


def _report_out(rep, args, stem: str) -> None:
    out = _out_dir(args)
    rep.save(out, stem)
    print(rep.summary())
    print(f"report: {out / (stem + '.csv')}")


def cmd_shard_sweep(args, cfg) -> int:
    config, params = _load_backbone(args)
    train, test = _load_data(cfg)
    sw, pr = cfg["sweep"], cfg["prompt"]
    rep = H.run_shard_sweep(config, params, train, test,
                            shard_counts=sw["shard_counts"],
                            seeds=_sweep_seeds(args, sw["seeds"]),
                            epochs=pr["epochs"],
                            finetune_epochs=sw["finetune_epochs"],
                            include_finetuned=sw["include_finetuned"],
                            workers=args.workers)
    _report_out(rep, args, "shard_sweep")
    print(f"mean gap to paragon (2-8 shards): {H.paragon_gap(rep):.4f}")
    return 0


def cmd_forget_curve(args, cfg) -> int:
    config, params = _load_backbone(args)
    train, test = _load_data(cfg)
    fg = cfg["forget"]
    seed = args.seed if args.seed is not None else fg["removal_seed"]
    if args.pool:
        pool = PL.PromptPool.open(args.pool)
    else:
        root = _out_dir(args) / "forget_pool"
        pool = H.build_shard_pool(config, params, train, fg["n_sources"], root,
                                  seed=seed, epochs=cfg["prompt"]["epochs"],
                                  workers=args.workers)
    rep = H.run_forget_curve(config, params, pool, test, removal_seed=seed)
    _report_out(rep, args, "forget_curve")
    for n_remaining, delta in H.error_increase(rep):
        print(f"  {n_remaining} sources left: error increase {delta:+.4f}")
    return 0


def cmd_cil(args, cfg) -> int:
    config, params = _load_backbone(args)
    train, test = _load_data(cfg)
    ci = cfg["cil"]
    methods = ("apt", "apt_w") if args.method == "both" else (args.method,)
    rep = H.run_cil(config, params, train, test, ci["n_episodes"],
                    seeds=_sweep_seeds(args, ci["seeds"]), methods=methods,
                    epochs=cfg["prompt"]["epochs"], k_protos=ci["k_protos"],
                    beta=ci["beta"], workers=args.workers)
    _report_out(rep, args, "cil")
    return 0


def cmd_dil(args, cfg) -> int:
    config, params = _load_backbone(args)
    train, test = _load_data(cfg)
    di = cfg["dil"]
    methods = ("apt", "apt_w") if args.method == "both" else (args.method,)
    rep = H.run_dil(config, params, train, test, di["train_domains"],
                    seeds=_sweep_seeds(args, di["seeds"]), methods=methods,
                    epochs=cfg["prompt"]["epochs"], k_protos=di["k_protos"],
                    beta=di["beta"], workers=args.workers)
    _report_out(rep, args, "dil")
    if "apt" in methods and "apt_w" in methods:
        n = rep.settings()[0]
        gap = rep.mean_accuracy("apt_w", n) - rep.mean_accuracy("apt", n)
        print(f"apt_w - apt gap: {gap:+.4f}")
    return 0


def cmd_bench(args, cfg) -> int:
    config, params = _load_backbone(args)
    bn = cfg["bench"]
    rep = H.run_bench(config, params, sizes=bn["sizes"], batch=bn["batch"],
                      repeats=bn["repeats"],
                      seed=args.seed if args.seed is not None else 0)
    _report_out(rep, args, "bench")
    fit = H.bench_linearity(rep)
    print(f"flop-delta linearity R^2: {fit['r2']:.6f}")
    return 0


def cmd_pool(args, cfg) -> int:
    if args.pool_verb == "ls":
        pool = _open_pool(args)
        print(f"pool: {pool.name} ({len(pool)} sources, {pool.n_classes} classes)")
        print(f"backbone: {pool.backbone_fingerprint}")
        for sid in pool.ids():
            e = pool._entries[sid]
            protos = "+prototypes" if e.get("has_prototypes") else ""
            print(f"  {sid}: {e['variant']} labels={e['label_map']} {protos}")
        return 0
    if args.pool_verb == "add":
        config, params = _load_backbone(args)
        if args.pool and Path(args.pool, "manifest.json").exists():
            pool = PL.PromptPool.open(args.pool)
        else:
            _, test = _load_data(cfg)
            n_classes = int(test.labels.max()) + 1
            pool = PL.PromptPool.create(args.pool, params, n_classes)
        ps = P.load_prompt_set(args.blob)
        pool.add(ps)
        print(f"added {ps.source_id!r}; pool now {pool.ids()}")
        return 0
    if args.pool_verb == "rm":
        pool = _open_pool(args)
        pool.forget(args.source_id)
        print(f"removed {args.source_id!r}; pool now {pool.ids()}")
        return 0
    raise ConfigError(f"unknown pool verb {args.pool_verb!r}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_flags(ap: argparse.ArgumentParser, suppress: bool) -> None:
    """Install the global flags. On subparsers every default is SUPPRESS so
    a flag given before the verb is not clobbered by the subparser pass;
    the real defaults are filled in once, after parsing."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    ap.add_argument("--config", default=d(None), help="JSON config file")
    ap.add_argument("--seed", type=int, default=d(None),
                    help="override the configured seed(s)")
    ap.add_argument("--out", default=d(None), help="output directory (default: runs/)")
    ap.add_argument("--workers", type=int, default=d(1),
                    help="concurrent per-source training jobs")
    ap.add_argument("--f64", action="store_true", default=d(False),
                    help="run in 64-bit floats (gradient-check mode)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="alacarte",
        description="Compose frozen-backbone prompt sources at inference time.",
    )
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, **kw):
        p = sub.add_parser(name, **kw)
        _global_flags(p, suppress=True)
        return p

    verb("pretrain", help="train and checkpoint the shared backbone")

    tp = verb("train-prompt", help="tune one source's prompt set")
    tp.add_argument("--backbone", help="backbone checkpoint path")
    tp.add_argument("--source-id", default="source")
    tp.add_argument("--shards", type=int, default=1,
                    help="partition the train set into this many shards")
    tp.add_argument("--shard-index", type=int, default=0)

    cp = verb("compose", help="predict with a subset of pooled sources")
    cp.add_argument("--backbone")
    cp.add_argument("--pool", required=True)
    cp.add_argument("--subset", help="comma-separated source ids (default: all)")

    ev = verb("eval", help="score one saved prompt set on the test split")
    ev.add_argument("--backbone")
    ev.add_argument("--blob", required=True)

    for name in ("shard-sweep", "cil", "dil", "bench"):
        p = verb(name)
        p.add_argument("--backbone")
        if name in ("cil", "dil"):
            p.add_argument("--method", choices=("apt", "apt_w", "both"), default="both")

    fc = verb("forget-curve", help="remove sources one at a time")
    fc.add_argument("--backbone")
    fc.add_argument("--pool", help="existing pool directory (default: build one)")

    pl = verb("pool", help="manage a pool directory")
    pl.add_argument("pool_verb", choices=("add", "rm", "ls"))
    pl.add_argument("--backbone")
    pl.add_argument("--pool", required=True)
    pl.add_argument("--blob", help="prompt blob to add")
    pl.add_argument("--source-id", help="source id to remove")
    return ap


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "train-prompt": cmd_train_prompt,
    "compose": cmd_compose,
    "eval": cmd_eval,
    "shard-sweep": cmd_shard_sweep,
    "forget-curve": cmd_forget_curve,
    "cil": cmd_cil,
    "dil": cmd_dil,
    "bench": cmd_bench,
    "pool": cmd_pool,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # `train-prompt` and `pool` own a --backbone flag the other verbs lack
    if not hasattr(args, "backbone"):
        args.backbone = None
    try:
        cfg = load_config(args.config)
        handler = _HANDLERS[args.verb]
        if args.f64:
            with T.precision("f64"):
                return handler(args, cfg)
        return handler(args, cfg)
    except (DataError, LabelError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except PoolError as e:
        print(f"pool error: {e}", file=sys.stderr)
        return 4
    except (ConfigError, AlacarteError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
