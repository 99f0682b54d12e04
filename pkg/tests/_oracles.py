"""Independent reference computations used to check the real implementations.

Everything here is deliberately naive (elementwise loops, textbook formulas)
and shares no code with the package under test.
"""

import math

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Max-norm relative error with a tiny floor on the denominator."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.abs(want).max(), np.abs(got).max(), 1e-8)
    return float(np.abs(got - want).max() / denom)


def softmax_nll_scalar(logits_row, target: int) -> float:
    """-log softmax(logits)[target] via plain python floats."""
    mx = max(float(v) for v in logits_row)
    exps = [math.exp(float(v) - mx) for v in logits_row]
    z = sum(exps)
    return -math.log(exps[target] / z)


def cumulative_fold_mod(elements, m: int):
    """Running sum mod m, one value per prefix."""
    out = []
    acc = 0
    for e in elements:
        acc = (acc + int(e)) % m
        out.append(acc)
    return out


def perm_compose_arrays(first, then):
    """Apply permutation `first`, then permutation `then` (arrays p[i]=image)."""
    return [then[first[i]] for i in range(len(first))]
