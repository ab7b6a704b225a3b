"""Pure numpy implementations of the compiled kernels in ``_core.pyx``.

The integer hashing is bit-for-bit the same as the compiled version; the
transcendental functions may differ in the last ulp between libm and numpy.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _unit(w):
    return ((w >> _S11).astype(np.float64) + 0.5) * 2.0**-53


def counter_normals(seed, start, count, step, k):
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed))
        idx = np.arange(start, start + count, dtype=np.int64).astype(np.uint64)
        h = _mix(_mix(key ^ idx) ^ np.uint64(step))[:, None]
        d = np.arange(2 * k, dtype=np.uint64)
        u = _unit(_mix(h ^ d[None, :]))
    u1, u2 = u[:, 0::2], u[:, 1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def kde_score(points, queries, h, chunk=256):
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    out = np.empty_like(queries)
    for lo in range(0, len(queries), chunk):
        q = queries[lo:lo + chunk]
        diff = points[None, :, :] - q[:, None, :]
        logw = -0.5 * np.sum(diff * diff, axis=-1) / (h * h)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        out[lo:lo + chunk] = np.einsum("mn,mnk->mk", w, diff) / (h * h * w.sum(axis=1)[:, None])
    return out


def pairwise_row_sums(a, b, chunk=512):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        diff = a[lo:lo + chunk, None, :] - b[None, :, :]
        out[lo:lo + chunk] = np.sqrt(np.sum(diff * diff, axis=-1)).sum(axis=1)
    return out
