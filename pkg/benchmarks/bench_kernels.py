"""Time the compiled kernels against the numpy fallback.

Shapes follow the first inception block of the 64x64 network with a batch of
10 pairs.  Run with ``python benchmarks/bench_kernels.py [--repeat N]``.
"""
import argparse
import timeit

import numpy as np

from endovo.kernels import backend_module


def cases(rng):
    x = rng.standard_normal((10, 8, 64, 64)).astype(np.float32)
    cols_shape = {}

    def im2col(mod):
        return lambda: mod.im2col(x, 5, 5, 1, 2)

    def col2im(mod):
        if "c" not in cols_shape:
            cols_shape["c"] = mod.im2col(x, 5, 5, 1, 2)
        cols = cols_shape["c"]
        return lambda: mod.col2im(cols, x.shape, 5, 5, 1, 2)

    def pool_fwd(mod):
        return lambda: mod.maxpool_forward(x, 3, 1, 1)

    def pool_bwd(mod):
        out, arg = mod.maxpool_forward(x, 2, 2, 0)
        dout = np.ones_like(out)
        return lambda: mod.maxpool_backward(dout, arg, 64, 64)

    return [("im2col 5x5", im2col), ("col2im 5x5", col2im), ("maxpool fwd 3x3/1", pool_fwd),
            ("maxpool bwd 2x2/2", pool_bwd)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats per case")
    args = ap.parse_args(argv)
    mods = {"python": backend_module("python")}
    try:
        mods["cython"] = backend_module("cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in mods) + ("     speedup" if len(mods) == 2 else ""))
    for label, make in cases(rng):
        times = {}
        for name, mod in mods.items():
            fn = make(mod)
            times[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        row = f"{label:<20}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in mods)
        if len(mods) == 2:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
