"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from longtail_synergy import _kernels


def make_inputs(rng: np.random.Generator) -> dict[str, tuple]:
    b, k, d, classes = 64, 3, 512, 100
    z = rng.standard_normal((b, 128))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    labels = rng.integers(0, 10, size=b)
    logits = np.clip(rng.standard_normal((b, classes)) * 0.3, -1, 1)
    deltas = rng.uniform(0.1, 0.5, size=classes)
    x = rng.standard_normal((b, d))
    centers = rng.standard_normal((b, k, d))
    gamma = rng.dirichlet(np.ones(k), size=b)
    t, r, f = (rng.standard_normal((b // 4, 32, 256)) for _ in range(3))
    feats = rng.standard_normal((5000, 64))
    flabels = rng.integers(0, classes, size=5000)
    return {
        "scl": (z, labels, 0.1),
        "ldam": (logits, rng.integers(0, classes, size=b), deltas, 30.0),
        "center": (x, centers, gamma),
        "mv": (t, r, f, 1e-12),
        "icd": (feats, flabels, classes),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    inputs = make_inputs(np.random.default_rng(0))
    backends = _kernels.backends()
    names = {"scl": "scl_fwd_bwd", "ldam": "ldam_fwd_bwd", "center": "center_fwd_bwd",
             "mv": "mv_fwd_bwd", "icd": "icd"}
    print(f"{'kernel':8s}" + "".join(f"{b:>14s}" for b in backends) + "   speedup")
    for key, fn_name in names.items():
        times = {}
        for bname, mod in backends.items():
            fn = getattr(mod, fn_name)
            times[bname] = min(timeit.repeat(lambda: fn(*inputs[key]), number=1, repeat=args.repeat)) * 1e3
        row = "".join(f"{times[b]:11.3f} ms" for b in backends)
        speed = f"{times['python'] / times['compiled']:8.2f}x" if "compiled" in times else "       -"
        print(f"{key:8s}{row}{speed}")


if __name__ == "__main__":
    main()
