"""Selective state-space recurrence and the Mamba-2 style layer built on it.

Per head the recurrence is::

    h_t = a_t * h_{t-1} + B_t x_t^T        h_t: N x P
    y_t = C_t^T h_t

with a scalar decay ``a_t`` in (0, 1) per head (Mamba-2's scalar-times-identity
transition), ``B_t, C_t`` N-vectors and ``x_t`` the head's P-slice of the
input. The scan is evaluated chunk by chunk: inside a chunk the output is the
masked quadratic form, and only the N x P state crosses chunk boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Rng, check_finite, init_weight, sigmoid

DECAY_FLOOR = 1e-12
SCAN_CHUNK = 64


@dataclass(frozen=True)
class SsmParams:
    """Per-step parameters: ``decay`` (T, H), ``b`` and ``c`` (T, H, N)."""

    decay: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        decay = np.asarray(self.decay, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if decay.ndim != 2 or b.ndim != 3 or b.shape != c.shape or b.shape[:2] != decay.shape:
            raise ShapeError(f"SsmParams shapes disagree: decay {decay.shape}, b {b.shape}, c {c.shape}")
        object.__setattr__(self, "decay", decay)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def T(self) -> int:
        return self.decay.shape[0]

    @property
    def heads(self) -> int:
        return self.decay.shape[1]

    @property
    def state_size(self) -> int:
        return self.b.shape[2]

    def slice(self, start: int, stop: int) -> "SsmParams":
        return SsmParams(self.decay[start:stop], self.b[start:stop], self.c[start:stop])


@dataclass
class SsmState:
    """Recurrent memory of every Mamba layer: one (H, N, P) array per layer index."""

    h: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def nbytes(self) -> int:
        return sum(arr.nbytes for arr in self.h.values())

    @property
    def n_values(self) -> int:
        return sum(arr.size for arr in self.h.values())


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    T, D = x.shape
    return x.reshape(T, heads, D // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, P = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * P)


def ssm_scan(x, params: SsmParams, h0: np.ndarray | None = None, chunk: int = SCAN_CHUNK):
    """Run the recurrence over ``x`` (T x D).

    Returns ``(y, h_last)`` where ``h_last`` has shape (H, N, D/H). Passing
    ``h_last`` back as ``h0`` for the next piece of the sequence continues the
    scan exactly where it stopped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"ssm_scan: x must be T x D, got {x.shape}")
    T, D = x.shape
    H, N = params.heads, params.state_size
    if params.T != T:
        raise ShapeError(f"ssm_scan: params cover {params.T} steps but x has {T}")
    if D % H:
        raise ShapeError(f"ssm_scan: width {D} not divisible by {H} heads")
    P = D // H
    h = np.zeros((H, N, P)) if h0 is None else np.array(h0, dtype=np.float64)
    if h.shape != (H, N, P):
        raise ShapeError(f"ssm_scan: state shape {h.shape} != {(H, N, P)}")

    xs = _split_heads(x, H)
    a = params.decay.T
    B = params.b.transpose(1, 0, 2)
    C = params.c.transpose(1, 0, 2)
    y = np.empty((H, T, P))
    for s in range(0, T, chunk):
        e = min(s + chunk, T)
        L = e - s
        ac, Bc, Cc, xc = a[:, s:e], B[:, s:e], C[:, s:e], xs[:, s:e]
        # seg[h, j, i] = prod_{k=j+1}^{i} a_k for i >= j
        grid = np.where(np.arange(L)[None, :] > np.arange(L)[:, None], ac[:, None, :], 1.0)
        seg = np.cumprod(grid, axis=2)
        decay = np.tril(seg.transpose(0, 2, 1))
        entry = np.cumprod(ac, axis=1)
        w = np.matmul(Cc, Bc.transpose(0, 2, 1)) * decay
        y[:, s:e] = np.matmul(w, xc) + entry[:, :, None] * np.matmul(Cc, h)
        h = entry[:, -1, None, None] * h + np.matmul(Bc.transpose(0, 2, 1), decay[:, -1, :, None] * xc)
    return check_finite(_merge_heads(y), "ssm_scan"), check_finite(h, "ssm_scan state")


class MambaLayer:
    """Input projection, selective scan, output projection.

    Decay ``a_t = sigmoid(x_t . w_a + b_a)`` per head, clipped into the open
    unit interval. ``B_t`` and ``C_t`` are linear in the layer input.
    """

    kind = "mamba2"

    def __init__(self, rng: Rng, dim: int, heads: int, state: int):
        self.dim, self.heads, self.state = dim, heads, state
        self.w_in = init_weight(rng.child("mamba", 0), dim, dim)
        self.w_b = init_weight(rng.child("mamba", 1), dim, heads * state)
        self.w_c = init_weight(rng.child("mamba", 2), dim, heads * state)
        self.w_a = init_weight(rng.child("mamba", 3), dim, heads)
        self.b_a = rng.child("mamba", 4).uniform(1.0, 3.0, heads)
        self.w_out = init_weight(rng.child("mamba", 5), dim, dim)
        for arr in (self.w_in, self.w_b, self.w_c, self.w_a, self.b_a, self.w_out):
            arr.setflags(write=False)

    def params(self, x: np.ndarray) -> SsmParams:
        T = x.shape[0]
        decay = np.clip(sigmoid(x @ self.w_a + self.b_a), DECAY_FLOOR, 1.0 - DECAY_FLOOR)
        b = (x @ self.w_b).reshape(T, self.heads, self.state)
        c = (x @ self.w_c).reshape(T, self.heads, self.state)
        return SsmParams(decay, b, c)

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None, record: dict | None = None):
        """Returns ``(out, h_last)``; ``record`` (if given) receives the scan input, params and output."""
        u = x @ self.w_in
        params = self.params(x)
        y, h = ssm_scan(u, params, h0)
        if record is not None:
            record.update(scan_input=u, params=params, scan_output=y, h0=h0)
        return y @ self.w_out, h

    def state_shape(self) -> tuple[int, int, int]:
        return (self.heads, self.state, self.dim // self.heads)
