"""Independent sequential recursions and comparison helpers for tests.

These deliberately avoid the scan engine and the subsequence machinery:
each is a direct step-by-step transcription of the defining recursion, so
they can serve as oracles for the parallel implementations.
"""

import numpy as np


def seq_suffix_products(a):
    """phi[t-1] = A^lam @ ... @ A^t by a plain right-to-left product."""
    lam, k = a.shape[0], a.shape[-1]
    out = np.empty_like(a)
    acc = np.eye(k, dtype=a.dtype)
    for t in range(lam, 0, -1):
        acc = acc @ a[t - 1]
        out[t - 1] = acc
    return out


def seq_backward_coeffs(a, ell):
    """q^t = q^{t+1} @ A^{t+1} + l^t with q^lam = l^lam, q^0 = q^1 @ A^1."""
    lam, k = a.shape[0], a.shape[-1]
    q = np.zeros((lam + 1, k), dtype=a.dtype)
    q[lam] = ell[lam - 1]
    for t in range(lam - 1, 0, -1):
        q[t] = q[t + 1] @ a[t] + ell[t - 1]
    q[0] = q[1] @ a[0]
    return q


def rel_error(test, ref):
    """Max absolute difference scaled by the reference magnitude."""
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(np.max(np.abs(ref)), 1e-300)
    return float(np.max(np.abs(test - ref)) / scale)


def grads_rel_error(test, ref):
    """Worst per-array rel_error across two lists of gradient dicts."""
    worst = 0.0
    for gt, gr in zip(test, ref):
        assert gt.keys() == gr.keys()
        for key in gr:
            worst = max(worst, rel_error(gt[key], gr[key]))
    return worst
