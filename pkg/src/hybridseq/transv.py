"""In-model vision-token compression.

A compression step at layer ``l`` drops a fraction ``p`` of the vision tokens
(uniformly, or the least-attended ones) and, before they disappear, lets the
instruction tokens cross-attend to the vision tokens through a gate
``tanh(alpha)``: ``X1 <- X1 + tanh(alpha) * CrossAttn(X1, source)``.

Schedules are written ``mode_layer_rate`` joined by ``-``, for example
``uni_7_0.5-attn_39_0.9``.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction
from dataclasses import dataclass, replace

import numpy as np

from .attention import merge_heads, split_heads
from .errors import (
    LayerOrderError,
    LayerRangeError,
    MissingScoresError,
    RateRangeError,
    ScheduleSyntaxError,
    SegmentError,
    ShapeError,
    UnknownModeError,
)
from .sequence import INSTRUCTION, VISION, TokenSequence
from .tensor import Rng, _softmax_inplace, init_weight, rms_norm

MODES = ("uni", "attn")
_INT_RE = re.compile(r"\d+")
_RATE_RE = re.compile(r"(\d+(\.\d*)?|\.\d+)")


def _check_rate(p: float, where: str = "") -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0):
        raise RateRangeError(f"rate {p} outside [0, 1]{where}")
    return p


@dataclass(frozen=True)
class TransVSpec:
    mode: str
    layer: int
    rate: float

    def __post_init__(self):
        if self.mode not in MODES:
            raise UnknownModeError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.layer < 0:
            raise LayerRangeError(f"layer {self.layer} is negative")
        object.__setattr__(self, "rate", _check_rate(self.rate))

    def __str__(self) -> str:
        return f"{self.mode}_{self.layer}_{self.rate:g}"


@dataclass(frozen=True)
class CompressionSchedule:
    specs: tuple[TransVSpec, ...] = ()

    def __post_init__(self):
        specs = tuple(self.specs)
        for prev, cur in zip(specs, specs[1:]):
            if cur.layer <= prev.layer:
                raise LayerOrderError(f"layer {cur.layer} in {cur} does not follow layer {prev.layer}")
        object.__setattr__(self, "specs", specs)

    def __iter__(self):
        return iter(self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def __str__(self) -> str:
        return "-".join(str(s) for s in self.specs) or "none"

    def at(self, layer: int) -> TransVSpec | None:
        for spec in self.specs:
            if spec.layer == layer:
                return spec
        return None

    def check_layers(self, n_layers: int) -> None:
        for spec in self.specs:
            if spec.layer >= n_layers:
                raise LayerRangeError(f"schedule layer {spec.layer} out of range for a {n_layers}-layer stack")

    def remap(self, src_layers: int, dst_layers: int) -> "CompressionSchedule":
        """Rescale layer indices proportionally, e.g. a 56-layer schedule onto 14 layers."""
        out, last = [], -1
        for spec in self.specs:
            layer = max(last + 1, min(dst_layers - 1, round_half_away(spec.layer * dst_layers / src_layers)))
            out.append(replace(spec, layer=layer))
            last = layer
        return CompressionSchedule(tuple(out))


def parse_schedule(text: str | None) -> CompressionSchedule:
    if text is None:
        return CompressionSchedule()
    text = text.strip()
    if text in ("", "none"):
        return CompressionSchedule()
    specs = []
    for segment in text.split("-"):
        parts = segment.split("_")
        if len(parts) != 3:
            raise ScheduleSyntaxError(f"segment {segment!r} is not mode_layer_rate")
        mode, layer, rate = parts
        if mode not in MODES:
            raise UnknownModeError(f"segment {segment!r}: unknown mode {mode!r}")
        if not _INT_RE.fullmatch(layer):
            raise ScheduleSyntaxError(f"segment {segment!r}: malformed layer index {layer!r}")
        if not _RATE_RE.fullmatch(rate):
            raise ScheduleSyntaxError(f"segment {segment!r}: malformed rate {rate!r}")
        p = float(rate)
        if not 0.0 <= p <= 1.0:
            raise RateRangeError(f"segment {segment!r}: rate {rate} outside [0, 1]")
        if specs and int(layer) <= specs[-1].layer:
            raise LayerOrderError(f"segment {segment!r}: layer {int(layer)} does not follow layer {specs[-1].layer}")
        specs.append(TransVSpec(mode, int(layer), p))
    return CompressionSchedule(tuple(specs))


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def drop_count(rate: float, n_vision: int) -> int:
    """Number of vision tokens removed at ``rate``: ``round(rate * n_vision)``, halves away from zero.

    The product is formed exactly on the rate's shortest decimal form, so
    ``0.7 * 45`` rounds as 31.5 and not as the binary 31.4999...
    """
    exact = Fraction(repr(_check_rate(rate))) * int(n_vision)
    return min(int(n_vision), math.floor(exact + Fraction(1, 2)))


def token_drop(vision, rate: float, mode: str, attn_scores=None):
    """Drop ``round(rate * T0)`` rows of ``vision``.

    ``uni`` keeps rows ``floor(i * T0 / K)`` for ``i < K`` (``K`` rows kept);
    ``attn`` drops the lowest-scoring rows, dropping the later index first on
    ties. Returns ``(kept_rows, kept_indices, dropped_indices)`` with both
    index arrays ascending.
    """
    vision = np.asarray(vision, dtype=np.float64)
    if mode not in MODES:
        raise UnknownModeError(f"unknown mode {mode!r}")
    T0 = vision.shape[0]
    n_drop = drop_count(rate, T0)
    n_keep = T0 - n_drop
    if mode == "uni" or n_drop == 0:
        kept = (np.arange(n_keep, dtype=np.int64) * T0) // n_keep if n_keep else np.zeros(0, dtype=np.int64)
    else:
        if attn_scores is None:
            raise MissingScoresError("attention-guided dropping needs scores from the last instruction token")
        scores = np.asarray(attn_scores, dtype=np.float64)
        if scores.shape != (T0,):
            raise ShapeError(f"token_drop: {scores.shape[0] if scores.ndim else 0} scores for {T0} vision tokens")
        order = np.lexsort((-np.arange(T0), scores))
        kept = np.sort(order[n_drop:])
    dropped = np.setdiff1d(np.arange(T0), kept)
    return vision[kept], kept, dropped


@dataclass(frozen=True)
class TransVParams:
    """Cross-attention projections plus the scalar gate ``alpha`` (0 at init)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int
    alpha: float = 0.0

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "TransVParams":
        ws = [init_weight(rng.child("transv", i), dim, dim) for i in range(4)]
        for w in ws:
            w.setflags(write=False)
        return cls(*ws, heads=heads, alpha=0.0)

    def with_alpha(self, alpha: float) -> "TransVParams":
        return replace(self, alpha=float(alpha))

    @property
    def gate(self) -> float:
        return math.tanh(self.alpha)


def cross_attention(queries: np.ndarray, source: np.ndarray, params: TransVParams) -> np.ndarray:
    """Multi-head attention of ``queries`` over every row of ``source`` (no mask).

    Both inputs are RMS-normalized first. An empty source transfers nothing.
    """
    if source.shape[0] == 0:
        return np.zeros_like(queries)
    H = params.heads
    qn, sn = rms_norm(queries), rms_norm(source)
    q = split_heads(qn @ params.w_q, H)
    k = split_heads(sn @ params.w_k, H)
    v = split_heads(sn @ params.w_v, H)
    logits = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(q.shape[-1])
    w = _softmax_inplace(logits)
    return merge_heads(np.matmul(w, v)) @ params.w_o


def transv_apply(
    seq: TokenSequence,
    spec: TransVSpec,
    params: TransVParams,
    attn_scores=None,
    transfer_source: str = "retained",
    return_indices: bool = False,
):
    """Transfer vision information into the instruction span, then drop vision tokens.

    The cross-attention reads the retained vision tokens (or the dropped ones
    with ``transfer_source="dropped"``). System and response rows are never
    touched, and with a zero gate neither are the instruction rows.
    """
    if transfer_source not in ("retained", "dropped"):
        raise ValueError(f"transfer_source must be 'retained' or 'dropped', got {transfer_source!r}")
    n_vis = seq.lengths[VISION]
    if seq.lengths[INSTRUCTION] == 0:
        raise SegmentError("compression needs a non-empty instruction span")
    if n_vis == 0:
        empty = np.zeros(0, dtype=np.int64)
        return (seq, empty, empty) if return_indices else seq
    if spec.mode == "attn" and attn_scores is None and drop_count(spec.rate, n_vis) > 0:
        raise MissingScoresError(f"{spec}: attention-guided dropping needs scores from the last instruction token")
    vis, ins = seq.span(VISION), seq.span(INSTRUCTION)
    x0 = seq.embeddings[vis.slice]
    retained, kept, dropped = token_drop(x0, spec.rate, spec.mode, attn_scores)
    gate = params.gate
    emb = seq.embeddings
    if gate != 0.0:
        source = retained if transfer_source == "retained" else x0[dropped]
        x1 = emb[ins.slice]
        emb = emb.copy()
        emb[ins.slice] = x1 + gate * cross_attention(x1, source, params)
    out = seq.keep_vision(kept, emb)
    return (out, kept, dropped) if return_indices else out
