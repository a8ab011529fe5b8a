"""Time each hot kernel under the numba backend and the numpy fallback.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--end-to-end]

The kernel table times both implementations in-process (both stay
importable regardless of which one is bound). --end-to-end additionally
re-runs a composed forward pass in two subprocesses, one per backend,
since the backend of the bound names is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from alacarte import kernels  # noqa: E402


def timeit(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        t0 = time.perf_counter()
        fn(*fresh)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def kernel_cases(rows, cols):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (rows, cols)).astype(np.float32)
    y = kernels.NUMPY_IMPLS["softmax_rows"](x.copy())
    gamma = np.ones(cols, dtype=np.float32)
    beta = np.zeros(cols, dtype=np.float32)
    _, mean, rstd = kernels.NUMPY_IMPLS["layernorm_rows"](x, gamma, beta, 1e-6)
    grad = rng.normal(0, 1, (rows, cols)).astype(np.float32)
    flat = x.reshape(-1).copy()
    state = np.zeros_like(flat)
    cents = rng.normal(0, 1, (16, cols)).astype(np.float64)
    pts = rng.normal(0, 1, (rows, cols)).astype(np.float64)
    labels = rng.integers(0, cols, rows).astype(np.int64)
    return {
        "softmax_rows": (x,),
        "softmax_rows_backward": (y, grad),
        "layernorm_rows": (x, gamma, beta, 1e-6),
        "layernorm_rows_backward": (x, gamma, mean, rstd, grad),
        "gelu_forward": (x,),
        "gelu_backward": (x, grad),
        "adamw_update": (flat, flat.copy(), state, state.copy(),
                         3, 1e-3, 0.9, 0.999, 1e-8, 0.02),
        "kmeans_assign": (pts, cents),
        "cross_entropy_forward": (x, labels),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true",
                    help="also time a composed forward pass per backend")
    args = ap.parse_args()

    if not kernels.NUMBA_IMPLS:
        print("numba backend unavailable (ALACARTE_NO_NUMBA set or numba missing);"
              " only numpy timings below")
    else:
        kernels.warmup()
        kernels.warmup(np.float64)

    cases = kernel_cases(args.rows, args.cols)
    print(f"shapes: ({args.rows}, {args.cols}), best of {args.repeats}")
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, case in cases.items():
        t_np = timeit(kernels.NUMPY_IMPLS[name], case, args.repeats)
        if kernels.NUMBA_IMPLS:
            jit = kernels.NUMBA_IMPLS[name]
            jit(*[a.copy() if isinstance(a, np.ndarray) else a for a in case])
            t_nb = timeit(jit, case, args.repeats)
            print(f"{name:<26} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")
        else:
            print(f"{name:<26} {t_np:>10.3f} {'-':>10} {'-':>8}")

    if args.end_to_end:
        print("\ncomposed forward, 16 images x 8 prompts (subprocess per backend):")
        for label, env_val in (("numba", "0"), ("numpy", "1")):
            env = dict(os.environ, ALACARTE_NO_NUMBA=env_val)
            out = subprocess.run(
                [sys.executable, "-c", _E2E], capture_output=True, text=True,
                env=env, cwd=os.path.join(os.path.dirname(__file__), ".."),
            )
            line = out.stdout.strip() or out.stderr.strip()
            print(f"  {label}: {line}")


_E2E = """
import sys, time
sys.path.insert(0, "src")
import numpy as np
from alacarte import backbone as B, prompts as P, kernels
cfg = B.BackboneConfig()
params = B.init_backbone(cfg, seed=0).freeze()
rng = np.random.default_rng(0)
imgs = rng.integers(0, 256, (16, 32, 32, 3), dtype=np.uint8)
sets = [P.init_prompt_set(cfg, f"s{i}", [0], params.fingerprint(), seed=i)
        for i in range(8)]
P.composed_forward(cfg, params, imgs, sets)
best = min(
    (lambda t0: (P.composed_forward(cfg, params, imgs, sets), time.perf_counter() - t0)[1])(
        time.perf_counter())
    for _ in range(3)
)
print(f"backend={kernels.BACKEND} best {best*1e3:.1f} ms")
"""


if __name__ == "__main__":
    main()
