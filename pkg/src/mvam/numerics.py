"""Small deterministic dense kernels shared by every other module.

Matrices are plain ``float64`` numpy arrays. Products are accumulated over the
inner dimension strictly left to right (no BLAS, no FMA), so results are
bit-reproducible across machines and agree exactly with a naive triple loop.

Random numbers come from numpy's PCG64 bit generator (``make_rng``). PCG64 is a
fixed, documented algorithm whose output stream depends only on the seed.
"""

from __future__ import annotations

import numpy as np


class NumericsError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


def contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` over the last axis of ``a`` / second-to-last of ``b``.

    Leading axes broadcast like ``np.matmul``. Every output entry is
    accumulated as ((0 + a0*b0) + a1*b1) + ..., each product rounded before
    the add (no fused multiply-add).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise NumericsError(f"inner dimension mismatch: {a.shape} x {b.shape}")
    n, k, p = a.shape[-2], a.shape[-1], b.shape[-1]
    if k == 0 or a.size == 0 or b.size == 0:
        return _contract_numpy(a, b)
    if b.ndim == 2:
        out = _kernel(a.reshape(1, -1, k), b[None])
        return out.reshape(a.shape[:-1] + (p,))
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.broadcast_to(a, batch + (n, k)).reshape(-1, n, k)
    b3 = np.broadcast_to(b, batch + (k, p)).reshape(-1, k, p)
    return _kernel(a3, b3).reshape(batch + (n, p))


def _contract_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]))
    tmp = np.empty_like(out)
    for i in range(a.shape[-1]):
        np.multiply(a[..., :, i : i + 1], b[..., i : i + 1, :], out=tmp)
        out += tmp
    return out


try:
    from numba import njit
except ImportError:  # pragma: no cover - same bits, only slower
    _kernel = _contract_numpy
else:

    @njit(cache=True)
    def _bmm(a, b, out):  # pragma: no cover - compiled
        for t in range(a.shape[0]):
            for i in range(a.shape[1]):
                for j in range(b.shape[2]):
                    out[t, i, j] = 0.0
                for k in range(a.shape[2]):
                    aik = a[t, i, k]
                    for j in range(b.shape[2]):
                        out[t, i, j] += aik * b[t, k, j]

    def _kernel(a3: np.ndarray, b3: np.ndarray) -> np.ndarray:
        out = np.empty((a3.shape[0], a3.shape[1], b3.shape[2]))
        _bmm(np.ascontiguousarray(a3), np.ascontiguousarray(b3), out)
        return out


def ordered_sum(x, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` accumulating strictly left to right.

    Trailing zeros never change the result, which keeps padded batches
    bit-identical to their unpadded instances.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    if x.shape[-1] == 0:
        out = np.zeros(x.shape[:-1])
    else:
        out = x[..., 0].copy()
        for i in range(1, x.shape[-1]):
            out += x[..., i]
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return check_finite(contract(a, b), "matmul result")


def softmax_rows(m, axis: int = -1) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    ``-inf`` entries are treated as masked and receive exactly zero weight; a
    row must contain at least one finite entry.
    """
    z = np.asarray(m, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise NumericsError("softmax input contains NaN or +inf")
    peak = np.max(z, axis=axis, keepdims=True)
    if np.any(peak == -np.inf):
        raise NumericsError("softmax row with every entry masked")
    e = np.exp(z - peak)
    return e / ordered_sum(e, axis=axis, keepdims=True)


def norm(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(np.sqrt(ordered_sum(u * u)))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise NumericsError(f"length mismatch: {u.size} vs {v.size}")
    nu, nv = norm(u), norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericsError("cosine of a zero-norm vector (degenerate embedding)")
    c = float(ordered_sum((u / nu) * (v / nv)))
    return min(1.0, max(-1.0, c))


def frobenius_sq(m) -> float:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return float(ordered_sum(ordered_sum(m * m, axis=-1), axis=-1))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
