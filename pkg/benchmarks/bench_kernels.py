"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from saltseg.kernels import backends


def cases(rng):
    x = rng.normal(size=(8, 16, 64, 64))
    cols = rng.normal(size=(8, 16, 3, 3, 64, 64))
    mask = (rng.random((101, 101)) < 0.45).astype(np.uint8)
    out, arg = backends()["python"].maxpool_forward(x, 2, 2, 0)
    g = rng.normal(size=out.shape)
    return {
        "im2col 8x16x64x64 k3": lambda k: k.im2col(x, 3, 1, 1),
        "col2im 8x16x64x64 k3": lambda k: k.col2im(cols, 64, 64, 3, 1, 1),
        "maxpool fwd 8x16x64x64 k2": lambda k: k.maxpool_forward(x, 2, 2, 0),
        "maxpool bwd 8x16x64x64 k2": lambda k: k.maxpool_backward(g, arg, 64, 64),
        "label 101x101 conn8": lambda k: k.label_components(mask, 8),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = backends()
    if "cython" not in impls:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':28s} " + " ".join(f"{name:>12s}" for name in impls) + "   speedup")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {name: min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
                 for name, mod in impls.items()}
        cols = " ".join(f"{times[n] * 1e3:10.2f}ms" for n in impls)
        speed = f"{times['python'] / times['cython']:8.1f}x" if "cython" in times else ""
        print(f"{label:28s} {cols} {speed}")


if __name__ == "__main__":
    main()
