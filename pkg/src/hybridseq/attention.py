"""Causal multi-head self-attention with structured masks and a KV cache.

Masks are described rather than materialized: a causal offset, optional
(query-category, key-category) pairs to cut, or an explicit dense boolean
matrix. Scores are computed in query blocks so long prefills never hold a
full T x T logit tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Rng, _softmax_inplace, check_finite, check_rows, init_weight

_BLOCK_ENTRIES = 1 << 24


@dataclass
class LayerCache:
    k: np.ndarray
    v: np.ndarray
    labels: np.ndarray

    @property
    def rows(self) -> int:
        return self.k.shape[1]


@dataclass
class KvCache:
    """Stored keys/values of every attention layer, keyed by layer index."""

    layers: dict[int, LayerCache] = field(default_factory=dict)

    def rows(self, layer: int) -> int:
        entry = self.layers.get(layer)
        return 0 if entry is None else entry.rows

    @property
    def nbytes(self) -> int:
        return sum(c.k.nbytes + c.v.nbytes for c in self.layers.values())

    def row_counts(self) -> dict[int, int]:
        return {i: c.rows for i, c in sorted(self.layers.items())}


@dataclass(frozen=True)
class AttentionMask:
    """Which keys each query may read.

    ``query_labels`` / ``key_labels`` are category codes (see
    :mod:`hybridseq.sequence`); every ``(q_label, k_label)`` pair in
    ``blocked`` is removed on top of the causal mask. ``dense`` replaces the
    structured description entirely and must be T_new x T_keys.
    """

    query_labels: np.ndarray | None = None
    key_labels: np.ndarray | None = None
    blocked: tuple[tuple[int, int], ...] = ()
    dense: np.ndarray | None = None

    @classmethod
    def from_dense(cls, mask) -> "AttentionMask":
        return cls(dense=np.asarray(mask).astype(bool))

    def apply(self, logits: np.ndarray, q_start: int, q_stop: int, offset: int) -> None:
        """Write ``-inf`` into masked entries of a (H, q_stop-q_start, kmax) block."""
        kmax = logits.shape[-1]
        if self.dense is not None:
            keep = self.dense[q_start:q_stop, :kmax]
            logits[:, ~keep] = -np.inf
            return
        b = q_stop - q_start
        lo = offset + q_start
        # keys in [lo + 1, kmax) are in the future for at least one query of the block
        tail = kmax - lo
        if tail > 1:
            fut = np.triu(np.ones((b, tail), dtype=bool), k=1)
            logits[:, :, lo:][:, fut] = -np.inf
        if self.blocked:
            ql = self.query_labels[q_start:q_stop]
            kl = self.key_labels[:kmax]
            for q_label, k_label in self.blocked:
                rows = np.flatnonzero(ql == q_label)
                cols = np.flatnonzero(kl == k_label)
                if rows.size and cols.size:
                    logits[:, rows[:, None], cols[None, :]] = -np.inf


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    T, D = x.shape
    return x.reshape(T, heads, D // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, P = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * P)


def blocked_attention(q, k, v, mask: AttentionMask | None, offset: int, keep_weights: bool = False):
    """Causal softmax attention over head-split arrays.

    ``q`` is (H, Tq, dh) for query positions ``offset .. offset+Tq-1``; ``k``
    and ``v`` are (H, Tk, dh) with ``Tk == offset + Tq``. Returns
    ``(out, weights)`` with ``weights`` (H, Tq, Tk) only when requested.
    """
    mask = mask or AttentionMask()
    H, Tq, dh = q.shape
    Tk = k.shape[1]
    if Tk != offset + Tq:
        raise ShapeError(f"attention: {Tk} keys for {Tq} queries at offset {offset}")
    q = q * (1.0 / np.sqrt(dh))
    out = np.empty_like(q)
    weights = np.zeros((H, Tq, Tk)) if keep_weights else None
    block = max(1, min(Tq, 256, _BLOCK_ENTRIES // max(1, H * Tk)))
    for s in range(0, Tq, block):
        e = min(s + block, Tq)
        kmax = offset + e
        logits = np.matmul(q[:, s:e], k[:, :kmax].transpose(0, 2, 1))
        mask.apply(logits, s, e, offset)
        rowmax = logits.max(axis=-1, keepdims=True)
        check_rows(rowmax, row_offset=offset + s)
        logits -= rowmax
        np.exp(logits, out=logits)
        total = logits.sum(axis=-1, keepdims=True)
        if keep_weights:
            logits /= total
            weights[:, s:e, :kmax] = logits
            out[:, s:e] = np.matmul(logits, v[:, :kmax])
        else:
            out[:, s:e] = np.matmul(logits, v[:, :kmax]) / total
    return out, weights


class AttentionLayer:
    kind = "attention"

    def __init__(self, rng: Rng, dim: int, heads: int):
        self.dim, self.heads = dim, heads
        self.w_q = init_weight(rng.child("attention", 0), dim, dim)
        self.w_k = init_weight(rng.child("attention", 1), dim, dim)
        self.w_v = init_weight(rng.child("attention", 2), dim, dim)
        self.w_o = init_weight(rng.child("attention", 3), dim, dim)
        for arr in (self.w_q, self.w_k, self.w_v, self.w_o):
            arr.setflags(write=False)

    def forward(
        self,
        x: np.ndarray,
        mask: AttentionMask | None = None,
        cache: LayerCache | None = None,
        labels: np.ndarray | None = None,
        capture: bool = False,
    ):
        """Attend ``x`` (T x D) over the cached keys plus itself.

        Returns ``(y, info, new_cache)``; ``info`` holds ``weights``,
        ``values`` and the pre-projection ``mixed`` stream when ``capture`` is
        set. ``labels`` tags the new rows in the returned cache.
        """
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"attention: input {x.shape} does not match width {self.dim}")
        H = self.heads
        q = split_heads(x @ self.w_q, H)
        k = split_heads(x @ self.w_k, H)
        v = split_heads(x @ self.w_v, H)
        new_labels = np.zeros(x.shape[0], dtype=np.int64) if labels is None else np.asarray(labels)
        if cache is not None and cache.rows:
            offset = cache.rows
            k = np.concatenate([cache.k, k], axis=1)
            v = np.concatenate([cache.v, v], axis=1)
            new_labels = np.concatenate([cache.labels, new_labels])
        else:
            offset = 0
        out, weights = blocked_attention(q, k, v, mask, offset, keep_weights=capture)
        mixed = merge_heads(out)
        y = check_finite(mixed @ self.w_o, "attention")
        info = {}
        if capture:
            info.update(weights=weights, values=v, mixed=mixed, offset=offset)
        return y, info, LayerCache(k, v, new_labels)

    def query_row(self, x: np.ndarray, query: int, mask: AttentionMask | None = None) -> np.ndarray:
        """Head-averaged attention weights of position ``query`` over positions ``0..query``."""
        H = self.heads
        q = split_heads(x[query : query + 1] @ self.w_q, H)
        k = split_heads(x[: query + 1] @ self.w_k, H)
        logits = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(q.shape[-1])
        (mask or AttentionMask()).apply(logits, query, query + 1, 0)
        check_rows(logits, row_offset=query)
        return _softmax_inplace(logits)[:, 0].mean(axis=0)


def attention_forward(layer: AttentionLayer, x, mask=None, cache: LayerCache | None = None):
    """Functional form: ``(y, updated_cache)``. ``mask`` may be dense T x T_keys or an AttentionMask."""
    if mask is not None and not isinstance(mask, AttentionMask):
        mask = AttentionMask.from_dense(mask)
    y, _, new_cache = layer.forward(np.asarray(x, dtype=np.float64), mask, cache)
    return y, new_cache
