"""Small dense matrix algebra and parallel associative scans.

State dimensions are tiny (k <= 4), so a "matrix" here is a trailing
(k, k) block and a "vector" a trailing (k,) block of a numpy array; any
leading axes are independent columns (neurons, batch entries).

Two scans are provided, both over the time axis of per-neuron Jacobian
sequences:

* ``scan_matprod_suffix``: ordered suffix products
  ``phi[t] = A[lam-1] @ A[lam-2] @ ... @ A[t]`` (newest factor on the
  left), used for the cumulative state-transition matrices.
* ``reverse_scan_q``: the backward coefficient recursion
  ``q^t = q^{t+1} @ A^{t+1} + l^t`` (row-vector convention) solved with
  the binary associative operator
  ``(Ma, va) * (Mb, vb) = (Ma @ Mb, va @ Mb + vb)`` over pairs taken in
  reverse time order.

Both scans run a Blelloch up/down sweep over a fixed power-of-two padded
tree.  The reduction tree never depends on the worker count (parallelism
is across neuron columns only), so results are bit-identical for any
worker count and across runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .errors import ConfigError, NumericError
from .workers import apply_workers

MAX_K = 4


def _check_matk(a: np.ndarray, name: str = "matrix") -> int:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ConfigError(f"{name} must have square trailing dims, got {a.shape}")
    k = a.shape[-1]
    if not 1 <= k <= MAX_K:
        raise ConfigError(f"{name} state dim must be in [1, {MAX_K}], got {k}")
    return k


def matk_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of (stacks of) k x k blocks with dimension checks."""
    ka = _check_matk(a, "a")
    kb = _check_matk(b, "b")
    if ka != kb:
        raise ConfigError(f"state dims differ: {ka} vs {kb}")
    return np.matmul(a, b)


def combine_pairs(pa, pb):
    """Binary associative operator of the backward scan.

    Pairs are (matrix, row-vector) tuples; ``pa`` was scanned earlier,
    i.e. sits later in time, than ``pb``.
    """
    ma, va = pa
    mb, vb = pb
    if ma.shape[-1] != mb.shape[-1]:
        raise ConfigError(f"state dims differ: {ma.shape[-1]} vs {mb.shape[-1]}")
    m = np.matmul(ma, mb)
    v = np.matmul(va[..., None, :], mb)[..., 0, :] + vb
    return m, v


def pow2_at_least(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


# ---------------------------------------------------------------------------
# numba kernels (neuron-major layout: (N, time, k, k) / (N, time, k))
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _mm(out, a, b, k):
    # out = a @ b for k x k blocks; out must not alias a or b
    for r in range(k):
        for c in range(k):
            acc = 0.0
            for j in range(k):
                acc += a[r, j] * b[j, c]
            out[r, c] = acc


@njit(cache=True, inline="always")
def _vm(out, v, m, k):
    # out = v @ m (row vector times matrix); out must not alias v
    for c in range(k):
        acc = 0.0
        for j in range(k):
            acc += v[j] * m[j, c]
        out[c] = acc


@njit(cache=True, inline="always")
def _copy_mat(dst, src, k):
    for r in range(k):
        for c in range(k):
            dst[r, c] = src[r, c]


@njit(cache=True, inline="always")
def _set_identity(dst, k):
    for r in range(k):
        for c in range(k):
            dst[r, c] = 1.0 if r == c else 0.0


@njit(parallel=True, cache=True)
def _suffix_products_kernel(a, work, out):
    """out[n, t] = A[n, lam-1] @ ... @ A[n, t] via Blelloch sweeps.

    ``a``: (N, lam, k, k) read-only; ``work``: (N, pad, k, k) scratch with
    pad a power of two >= lam; ``out``: (N, lam, k, k).
    """
    n_cols, lam = a.shape[0], a.shape[1]
    pad = work.shape[1]
    k = a.shape[2]
    for n in prange(n_cols):
        w = work[n]
        # scan order j reverses time: element j is A[lam-1-j]; pad with I
        for j in range(pad):
            if j < lam:
                _copy_mat(w[j], a[n, lam - 1 - j], k)
            else:
                _set_identity(w[j], k)
        t_left = np.empty((k, k), dtype=a.dtype)
        t_self = np.empty((k, k), dtype=a.dtype)
        # up-sweep: w[i] = w[i - half] @ w[i]
        half = 1
        while half < pad:
            step = half * 2
            for i in range(step - 1, pad, step):
                _mm(t_self, w[i - half], w[i], k)
                _copy_mat(w[i], t_self, k)
            half = step
        # down-sweep: leaves exclusive left prefix products in w
        _set_identity(w[pad - 1], k)
        half = pad // 2
        while half >= 1:
            step = half * 2
            for i in range(step - 1, pad, step):
                _copy_mat(t_left, w[i - half], k)
                _copy_mat(t_self, w[i], k)
                _copy_mat(w[i - half], t_self, k)
                _mm(w[i], t_self, t_left, k)
            half //= 2
        # inclusive combine against the pristine input
        for j in range(lam):
            _mm(out[n, lam - 1 - j], w[j], a[n, lam - 1 - j], k)


@njit(parallel=True, cache=True)
def _backward_coeffs_kernel(a, ell, wm, wv, q):
    """Backward coefficients q[n, t] for t = 0..lam via the pair scan.

    ``a``: (N, lam, k, k) with a[n, i] the state Jacobian of step i+1;
    ``ell``: (N, lam, k) with ell[n, i] the loss gradient of step i+1;
    ``wm``/``wv``: (N, pad, k, k) / (N, pad, k) scratch;
    ``q``: (N, lam+1, k) output, row-vector semantics.

    Scan element j (j = 0..lam-1) is the pair (A^{t+1}, l^t) for
    t = lam - j, with A^{lam+1} = I.  q^0 = q^1 @ A^1 is appended after
    the scan.
    """
    n_cols, lam = a.shape[0], a.shape[1]
    pad = wm.shape[1]
    k = a.shape[2]
    for n in prange(n_cols):
        m = wm[n]
        v = wv[n]
        for j in range(pad):
            if j == 0:
                _set_identity(m[0], k)
                for c in range(k):
                    v[0, c] = ell[n, lam - 1, c]
            elif j < lam:
                t = lam - j
                _copy_mat(m[j], a[n, t], k)
                for c in range(k):
                    v[j, c] = ell[n, t - 1, c]
            else:
                _set_identity(m[j], k)
                for c in range(k):
                    v[j, c] = 0.0
        t_mat = np.empty((k, k), dtype=a.dtype)
        t_vec = np.empty(k, dtype=a.dtype)
        s_mat = np.empty((k, k), dtype=a.dtype)
        s_vec = np.empty(k, dtype=a.dtype)
        # up-sweep: pair[i] = pair[i - half] * pair[i]
        half = 1
        while half < pad:
            step = half * 2
            for i in range(step - 1, pad, step):
                _vm(t_vec, v[i - half], m[i], k)
                for c in range(k):
                    v[i, c] = t_vec[c] + v[i, c]
                _mm(t_mat, m[i - half], m[i], k)
                _copy_mat(m[i], t_mat, k)
            half = step
        # down-sweep
        _set_identity(m[pad - 1], k)
        for c in range(k):
            v[pad - 1, c] = 0.0
        half = pad // 2
        while half >= 1:
            step = half * 2
            for i in range(step - 1, pad, step):
                # t := pair[i - half]; pair[i - half] := pair[i];
                # pair[i] := old pair[i] * t
                _copy_mat(t_mat, m[i - half], k)
                for c in range(k):
                    t_vec[c] = v[i - half, c]
                for c in range(k):
                    v[i - half, c] = v[i, c]
                _copy_mat(m[i - half], m[i], k)
                _vm(s_vec, v[i - half], t_mat, k)  # old v[i] @ t.m
                for c in range(k):
                    v[i, c] = s_vec[c] + t_vec[c]
                _mm(s_mat, m[i - half], t_mat, k)  # old m[i] @ t.m
                _copy_mat(m[i], s_mat, k)
            half //= 2
        # inclusive combine with pristine element j, keep only the vector
        for j in range(lam):
            t = lam - j
            if j == 0:
                for c in range(k):
                    q[n, lam, c] = v[0, c] + ell[n, lam - 1, c]
            else:
                _vm(t_vec, v[j], a[n, t], k)
                for c in range(k):
                    q[n, t, c] = t_vec[c] + ell[n, t - 1, c]
        # q^0 = q^1 @ A^1
        _vm(t_vec, q[n, 1], a[n, 0], k)
        for c in range(k):
            q[n, 0, c] = t_vec[c]


# ---------------------------------------------------------------------------
# public array API (time-first layout)
# ---------------------------------------------------------------------------


def _to_columns(a_seq: np.ndarray, k_tail: int) -> tuple[np.ndarray, tuple]:
    """Reshape a time-first (lam, ..., trailing) array to (N, lam, trailing)."""
    lam = a_seq.shape[0]
    mid = a_seq.shape[1:a_seq.ndim - k_tail]
    tail = a_seq.shape[a_seq.ndim - k_tail:]
    n = int(np.prod(mid)) if mid else 1
    cols = np.ascontiguousarray(
        a_seq.reshape((lam, n) + tail).transpose((1, 0) + tuple(range(2, 2 + k_tail)))
    )
    return cols, mid


def _from_columns(cols: np.ndarray, mid: tuple, k_tail: int) -> np.ndarray:
    length = cols.shape[1]
    tail = cols.shape[2:]
    out = cols.transpose((1, 0) + tuple(range(2, 2 + k_tail)))
    return out.reshape((length,) + mid + tail)


def scan_matprod_suffix(a_seq: np.ndarray, workers: int | None = None) -> np.ndarray:
    """Suffix products phi[t] = A[lam-1] @ ... @ A[t] of a Jacobian sequence.

    ``a_seq`` has shape (lam, ..., k, k); the result has the same shape with
    element t-1 holding the ordered product of elements t-1..lam-1 (newest
    on the left).  An empty sequence yields an empty result.
    """
    a_seq = np.asarray(a_seq)
    if a_seq.shape[0] == 0:
        return a_seq.copy()
    _check_matk(a_seq, "a_seq")
    apply_workers(workers)
    cols, mid = _to_columns(a_seq, 2)
    n, lam, k = cols.shape[0], cols.shape[1], cols.shape[2]
    work = np.empty((n, pow2_at_least(lam), k, k), cols.dtype)
    out = np.empty_like(cols)
    _suffix_products_kernel(cols, work, out)
    return _from_columns(out, mid, 2)


def reverse_scan_q(
    a_seq: np.ndarray, l_seq: np.ndarray, workers: int | None = None
) -> np.ndarray:
    """Backward coefficients q^0..q^lam of the reverse linear recursion.

    ``a_seq``: (lam, ..., k, k) state Jacobians for steps 1..lam;
    ``l_seq``: (lam, ..., k) per-step loss gradients (row vectors).
    Returns (lam+1, ..., k) with q^lam = l^lam, q^t = q^{t+1} @ A^{t+1} + l^t
    and q^0 = q^1 @ A^1.
    """
    a_seq = np.asarray(a_seq)
    l_seq = np.asarray(l_seq)
    k = _check_matk(a_seq, "a_seq")
    if l_seq.shape != a_seq.shape[:-1]:
        raise ConfigError(
            f"loss-gradient shape {l_seq.shape} does not match Jacobians {a_seq.shape}"
        )
    lam = a_seq.shape[0]
    if lam == 0:
        return np.zeros_like(l_seq, shape=(1,) + l_seq.shape[1:])
    apply_workers(workers)
    a_cols, mid = _to_columns(a_seq, 2)
    l_cols, _ = _to_columns(l_seq, 1)
    n = a_cols.shape[0]
    pad = pow2_at_least(lam)
    wm = np.empty((n, pad, k, k), a_cols.dtype)
    wv = np.empty((n, pad, k), a_cols.dtype)
    q = np.empty((n, lam + 1, k), a_cols.dtype)
    _backward_coeffs_kernel(a_cols, l_cols, wm, wv, q)
    return _from_columns(q, mid, 1)


def finite_difference_jacobian(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued map at ``x``."""
    if h <= 0:
        raise ConfigError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    base = np.atleast_1d(np.asarray(fn(x), dtype=np.float64))
    jac = np.empty((base.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = np.atleast_1d(np.asarray(fn(xp), dtype=np.float64))
        fm = np.atleast_1d(np.asarray(fn(xm), dtype=np.float64))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericError(f"non-finite function value at perturbation {i}")
        jac[:, i] = (fp - fm) / (2.0 * h)
    return jac
