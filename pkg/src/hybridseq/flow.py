"""Information-flow analysis over captured forward passes.

Score matrices put both layer kinds on one footing: attention layers expose
their softmax weights ``M[i, j]``; Mamba layers expose the unrolled scan
coefficient ``M'[i, j] = C_i . B_j * prod_{k=j+1..i} a_k`` so that
``y_i = sum_j M'[i, j] x_j`` per head, reported as ``|M'|`` unless the signed
values are asked for.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocking import BlockingConfig
from .config import ATTENTION, MAMBA
from .errors import CaptureError, LayerKindError, SegmentError
from .model import CaptureTrace, HybridModel
from .sequence import INSTRUCTION, KIND_CODES, KINDS, TokenSequence
from .tensor import Rng
from .transv import CompressionSchedule, TransVSpec

#: Source categories averaged into the whole-sequence score.
MEAN_SOURCES = ("instruction", "vision", "response")

SWEEP_COLUMNS = [
    "layer", "rate", "mode", "divergence_logits", "divergence_hidden",
    "cosine_logits", "cosine_hidden", "vision_tokens_after",
]
CATEGORY_COLUMNS = ["layer", "kind", "source", "target", "score"]


@dataclass(frozen=True)
class ScoreMatrix:
    layer: int
    head: int
    kind: str
    values: np.ndarray


def _record(trace: CaptureTrace, layer: int, kind: str):
    if not trace.captured:
        raise CaptureError("trace was recorded without capture; rerun forward(capture=True)")
    if not 0 <= layer < len(trace.records):
        raise LayerKindError(f"layer {layer} not in trace of {len(trace.records)} layers")
    rec = trace.records[layer]
    if rec.kind != kind:
        raise LayerKindError(f"layer {layer} is a {rec.kind} layer, not {kind}")
    return rec


def extract_attention_scores(trace: CaptureTrace, layer: int) -> list[ScoreMatrix]:
    rec = _record(trace, layer, ATTENTION)
    return [ScoreMatrix(layer, h, ATTENTION, w) for h, w in enumerate(rec.mixer["weights"])]


def mamba_score_values(params, signed: bool = False) -> np.ndarray:
    """(H, T, T) matrix of ``C_i . B_j * prod_{k=j+1..i} a_k`` (zero above the diagonal)."""
    a = params.decay.T
    H, T = a.shape
    prod = np.zeros((H, T, T))
    for i in range(T):
        prod[:, i, i] = 1.0
        if i:
            prod[:, i, :i] = prod[:, i - 1, :i] * a[:, i, None]
    cb = np.matmul(params.c.transpose(1, 0, 2), params.b.transpose(1, 2, 0))
    vals = cb * prod
    return vals if signed else np.abs(vals)


def extract_mamba_scores(trace: CaptureTrace, layer: int, signed: bool = False) -> list[ScoreMatrix]:
    rec = _record(trace, layer, MAMBA)
    vals = mamba_score_values(rec.mixer["params"], signed)
    return [ScoreMatrix(layer, h, MAMBA, v) for h, v in enumerate(vals)]


def extract_scores(trace: CaptureTrace, layer: int, signed: bool = False) -> list[ScoreMatrix]:
    if not 0 <= layer < len(trace.records):
        raise LayerKindError(f"layer {layer} not in trace of {len(trace.records)} layers")
    kind = trace.records[layer].kind
    if kind == ATTENTION:
        return extract_attention_scores(trace, layer)
    if kind == MAMBA:
        return extract_mamba_scores(trace, layer, signed)
    raise LayerKindError(f"layer {layer} is an {kind} layer and has no token-mixing scores")


@dataclass
class CategoryStats:
    """``pairs[(source, target)]`` and ``overall[target]``; ``None`` where undefined."""

    pairs: dict[tuple[str, str], float | None] = field(default_factory=dict)
    overall: dict[str, float | None] = field(default_factory=dict)


def head_average(scores) -> np.ndarray:
    """Average heads; Mamba rows are L1-normalized per head first."""
    if isinstance(scores, ScoreMatrix):
        scores = [scores]
    mats = []
    for sm in scores:
        vals = np.asarray(sm.values, dtype=np.float64)
        if sm.kind == MAMBA:
            vals = np.abs(vals)
            norm = vals.sum(axis=1, keepdims=True)
            vals = np.divide(vals, norm, out=np.zeros_like(vals), where=norm > 0)
        mats.append(vals)
    return np.mean(mats, axis=0)


def category_attention(scores, seq: TokenSequence) -> CategoryStats:
    """Category-level scores ``sum_{i in A, j in B} a_ij / #{i in A : sum_{j in B} a_ij > 0}``.

    ``overall[B]`` is the arithmetic mean over the instruction, vision and
    response sources that are defined.
    """
    a = head_average(scores)
    if a.shape != (seq.T, seq.T):
        raise SegmentError(f"score matrix {a.shape} does not match a sequence of {seq.T} tokens")
    labels = seq.labels()
    stats = CategoryStats()
    for src in KINDS:
        rows = labels == KIND_CODES[src]
        for tgt in KINDS:
            cols = labels == KIND_CODES[tgt]
            if not rows.any() or not cols.any():
                stats.pairs[(src, tgt)] = None
                continue
            per_row = a[np.ix_(rows, cols)].sum(axis=1)
            attending = int(np.count_nonzero(per_row > 0))
            stats.pairs[(src, tgt)] = float(per_row.sum() / attending) if attending else None
    for tgt in KINDS:
        vals = [stats.pairs[(src, tgt)] for src in MEAN_SOURCES if stats.pairs[(src, tgt)] is not None]
        stats.overall[tgt] = float(np.mean(vals)) if vals else None
    return stats


def category_rows(trace: CaptureTrace) -> list[dict]:
    """Category statistics for every attention and Mamba layer of a captured trace."""
    out = []
    for rec in trace.records:
        if rec.kind not in (ATTENTION, MAMBA):
            continue
        stats = category_attention(extract_scores(trace, rec.index), rec.layout)
        for (src, tgt), val in stats.pairs.items():
            out.append({"layer": rec.index, "kind": rec.kind, "source": src, "target": tgt, "score": val})
        for tgt, val in stats.overall.items():
            out.append({"layer": rec.index, "kind": rec.kind, "source": "all", "target": tgt, "score": val})
    return out


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a.ravel(), b.ravel()) / (na * nb))


def _probe_outputs(model: HybridModel, seq: TokenSequence, schedule, **kw):
    logits, trace = model.forward(seq, schedule, last_only=True, **kw)
    layout = trace.final_layout
    last_ins = layout.span(INSTRUCTION).stop - 1
    return logits[-1], trace.final_hidden[last_ins], layout


def redundancy_sweep(seq: TokenSequence, model: HybridModel, layers, rates, mode: str = "uni",
                     strict: bool = False) -> list[dict]:
    """Pure dropping (zero gate, no transfer) at one layer per row, compared with the untouched run."""
    base_logits, base_hidden, _ = _probe_outputs(model, seq, None)
    rows = []
    for layer in layers:
        zero_gate = {layer: model.transv_params[layer].with_alpha(0.0)}
        for rate in rates:
            schedule = CompressionSchedule((TransVSpec(mode, int(layer), float(rate)),))
            logits, hidden, layout = _probe_outputs(model, seq, schedule, strict=strict, transv_params=zero_gate)
            rows.append({
                "layer": int(layer),
                "rate": float(rate),
                "mode": mode,
                "divergence_logits": float(np.max(np.abs(logits - base_logits))),
                "divergence_hidden": float(np.max(np.abs(hidden - base_hidden))),
                "cosine_logits": _cosine_distance(logits, base_logits),
                "cosine_hidden": _cosine_distance(hidden, base_hidden),
                "vision_tokens_after": layout.lengths[1],
            })
    return rows


def _span(seq: TokenSequence, span) -> slice:
    if isinstance(span, str):
        return seq.span(span).slice
    start, stop = span
    return slice(int(start), int(stop))


def perturbation_directions(seq: TokenSequence, target_span, n: int, seed: int = 0) -> list[np.ndarray]:
    """Unit-norm random directions (T x D, zero outside ``target_span``)."""
    sl = _span(seq, target_span)
    rng = Rng(seed).child("perturb")
    dirs = []
    for _ in range(n):
        d = np.zeros_like(seq.embeddings)
        d[sl] = rng.normal(d[sl].shape)
        norm = np.linalg.norm(d)
        dirs.append(d / norm if norm > 0 else d)
    return dirs


def perturbation_flow(seq: TokenSequence, model: HybridModel, target_span, probe_span,
                      blocking: BlockingConfig | None = None, schedule=None,
                      eps: float = 1e-3, directions: int = 4, seed: int = 0) -> float:
    """RMS over random directions of the central-difference directional derivative of the probe outputs.

    Probe outputs are the final residual-stream rows of ``probe_span`` (a
    category name is resolved on the post-compression layout).
    """
    if eps == 0 or directions == 0:
        return 0.0
    if len(range(*_span(seq, target_span).indices(seq.T))) == 0:
        return 0.0

    def probe(emb):
        _, trace = model.forward(seq.replace_embeddings(emb), schedule, blocking, last_only=True)
        return trace.final_hidden[_span(trace.final_layout, probe_span)]

    total = 0.0
    for d in perturbation_directions(seq, target_span, directions, seed):
        plus = probe(seq.embeddings + eps * d)
        minus = probe(seq.embeddings - eps * d)
        total += float(np.sum(((plus - minus) / (2 * eps)) ** 2))
    return float(np.sqrt(total / directions))


def write_score_csv(score: ScoreMatrix, path) -> None:
    """T x T values, one row per query position, no header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in score.values:
            writer.writerow([repr(float(v)) for v in row])


def write_segment_sidecar(seq: TokenSequence, path) -> None:
    """Span boundaries for drawing dividers over a heatmap: ``kind,index,start,stop``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "index", "start", "stop"])
        for seg in seq.segments:
            writer.writerow([seg.kind, 0, seg.start, seg.stop])
        for k, (start, stop) in enumerate(seq.frame_spans):
            writer.writerow(["frame", k, start, stop])


def export_heatmap(trace: CaptureTrace, layer: int, head: int, out_dir, signed: bool = False) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = extract_scores(trace, layer, signed)
    if not 0 <= head < len(scores):
        raise LayerKindError(f"head {head} out of range; layer {layer} has {len(scores)} heads")
    values_path = out_dir / f"scores_layer{layer}_head{head}.csv"
    sidecar_path = out_dir / f"segments_layer{layer}.csv"
    write_score_csv(scores[head], values_path)
    write_segment_sidecar(trace.records[layer].layout, sidecar_path)
    return values_path, sidecar_path


def write_rows(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
