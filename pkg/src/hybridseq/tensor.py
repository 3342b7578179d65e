"""Dense float64 kernels shared by every layer.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
validate shapes and finiteness so that contract violations surface as
exceptions instead of silently propagating NaNs through a deep stack.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError, NonFiniteError, ShapeError

RMS_EPS = 1e-6

#: Keys accepted by :meth:`Rng.child` to give each weight group its own stream.
_STREAM_TAGS = {
    "embedding": 1,
    "mamba": 2,
    "attention": 3,
    "mlp": 4,
    "transv": 5,
    "input": 6,
    "perturb": 7,
}


class Rng:
    """Seeded PCG64 generator (numpy ``Generator`` over ``SeedSequence``).

    Child streams are derived from ``(seed, tag, index)`` rather than drawn
    sequentially, so adding a layer never shifts the weights of another one.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.path])))

    def child(self, tag: str, index: int = 0) -> "Rng":
        return Rng(self.seed, *self.path, _STREAM_TAGS[tag], index)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen.integers(low, high, size=size)


def init_weight(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    """Scaled uniform init in ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]``."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b``.

    Backed by numpy's BLAS. Repeated calls with identical inputs are
    bit-identical; the summation order inside a dot product is the BLAS
    kernel's, not a naive left-to-right loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: left operand {a.shape} incompatible with right operand {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def _softmax_inplace(logits: np.ndarray) -> np.ndarray:
    # Rows must already carry -inf on masked entries and at least one finite entry.
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def masked_softmax(logits, mask=None) -> np.ndarray:
    """Row softmax over the last axis with masked entries forced to exactly 0.

    ``mask`` is boolean-like and broadcastable to ``logits``; truthy entries
    are kept. Masking is additive (``-inf`` before the exponential), so a
    masked position receives zero weight rather than ``exp(0)``.
    """
    out = np.array(logits, dtype=np.float64, copy=True)
    if mask is not None:
        keep = np.asarray(mask).astype(bool)
        try:
            keep = np.broadcast_to(keep, out.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask {keep.shape} does not match logits {out.shape}") from None
        out[~keep] = -np.inf
    check_rows(out)
    return _softmax_inplace(out)


def check_rows(logits: np.ndarray, row_offset: int = 0) -> None:
    """Raise :class:`DegenerateRowError` when a row (axis -2) has no unmasked entry."""
    if logits.shape[-1] == 0:
        raise DegenerateRowError(row_offset, "row has no keys")
    bad = ~np.isfinite(logits.max(axis=-1))
    if bad.ndim > 1:
        bad = bad.reshape(-1, bad.shape[-1]).any(axis=0)
    if np.any(bad):
        raise DegenerateRowError(int(np.argmax(bad)) + row_offset)


def rms_norm(x: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))
