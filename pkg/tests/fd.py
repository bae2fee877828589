"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

STEP = 1e-5
FLOOR = 1e-6


def rel_error(analytic, numeric, floor=FLOOR):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_grad(f, x, idx=None, step=STEP):
    """Gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * step))
    return np.array(out)
