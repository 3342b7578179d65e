"""Per-frame token merging in the projector, plus frame ingestion.

Each frame is merged independently by repeated bipartite soft matching:
tokens at even positions form set A, odd positions set B; every A token
finds its most cosine-similar B token, and the ``r`` best-matched A tokens
are folded into their partners by size-weighted averaging. ``r`` is half the
smaller set (at least 1) and never overshoots the target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MergeError, ShapeError
from .sequence import TokenSequence
from .tensor import Rng


@dataclass(frozen=True)
class FrameTokens:
    tokens: np.ndarray
    sizes: np.ndarray | None = None
    index: int = 0

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ShapeError(f"frame tokens must be F x D, got {tokens.shape}")
        sizes = np.ones(tokens.shape[0]) if self.sizes is None else np.asarray(self.sizes, dtype=np.float64)
        if sizes.shape != (tokens.shape[0],) or np.any(sizes < 1):
            raise ShapeError("frame sizes must be one weight >= 1 per token")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "sizes", sizes)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def merge_pass_count(n: int) -> int:
    return max(1, (n // 2) // 2)


def tome_merge(frame: FrameTokens, target: int, return_groups: bool = False):
    """Merge ``frame`` down to exactly ``target`` tokens.

    With ``return_groups`` also returns, per output token, the sorted list of
    input positions folded into it.
    """
    n = len(frame)
    if n == 0:
        raise MergeError("cannot merge an empty frame")
    if not 1 <= target <= n:
        raise MergeError(f"target {target} must lie in [1, {n}]")
    x, sizes = frame.tokens.copy(), frame.sizes.copy()
    groups = [[i] for i in range(n)]
    while x.shape[0] > target:
        cur = x.shape[0]
        a_idx, b_idx = np.arange(0, cur, 2), np.arange(1, cur, 2)
        r = min(merge_pass_count(cur), cur - target)
        sim = _unit_rows(x[a_idx]) @ _unit_rows(x[b_idx]).T
        best = sim.argmax(axis=1)
        order = np.argsort(-sim.max(axis=1), kind="stable")
        src, unmerged = order[:r], order[r:]

        wsum = x[b_idx] * sizes[b_idx, None]
        size_b = sizes[b_idx].copy()
        for a in src:
            dst = best[a]
            wsum[dst] += x[a_idx[a]] * sizes[a_idx[a]]
            size_b[dst] += sizes[a_idx[a]]
            groups[b_idx[dst]].extend(groups[a_idx[a]])
        x[b_idx] = wsum / size_b[:, None]
        sizes[b_idx] = size_b

        keep = np.sort(np.concatenate([a_idx[unmerged], b_idx]))
        x, sizes = x[keep], sizes[keep]
        groups = [groups[k] for k in keep]
    out = FrameTokens(x, sizes, frame.index)
    if return_groups:
        return out, [sorted(g) for g in groups]
    return out


def frame_position_tag(frame_index: int, dim: int) -> np.ndarray:
    """Sinusoidal tag for a frame index (sin on even channels, cos on odd)."""
    half = np.arange(0, dim, 2)
    angle = frame_index / np.power(10000.0, half / dim)
    tag = np.zeros(dim)
    tag[0::2] = np.sin(angle)
    tag[1::2] = np.cos(angle[: dim // 2])
    return tag


def synthetic_frames(n_frames: int, tokens_per_frame: int, dim: int, seed: int, objects: int = 4) -> list[FrameTokens]:
    """Random frames built from a handful of per-frame object vectors plus noise, then tagged."""
    frames = []
    for f in range(n_frames):
        rng = Rng(seed, 17, f)
        centers = rng.normal((objects, dim))
        which = rng.integers(0, objects, tokens_per_frame)
        tokens = centers[which] + rng.normal((tokens_per_frame, dim), scale=0.3)
        frames.append(FrameTokens(tokens + frame_position_tag(f, dim), index=f))
    return frames


def project_frames(frames: list[FrameTokens], target: int) -> list[FrameTokens]:
    return [tome_merge(fr, min(target, len(fr))) if len(fr) else fr for fr in frames]


def read_frames_jsonl(path) -> list[FrameTokens]:
    """One JSON object per line: ``{"frame_index": int, "tokens": [[float, ...], ...]}``.

    An optional ``"sizes"`` list carries merge weights. Frames are returned
    sorted by ``frame_index``.
    """
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                frames.append(FrameTokens(obj["tokens"], obj.get("sizes"), int(obj["frame_index"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ShapeError(f"{path}:{lineno}: bad frame record ({exc})") from None
    frames.sort(key=lambda fr: fr.index)
    return frames


def write_frames_jsonl(frames: list[FrameTokens], path) -> None:
    with open(Path(path), "w") as fh:
        for fr in frames:
            rec = {"frame_index": fr.index, "tokens": fr.tokens.tolist()}
            if np.any(fr.sizes != 1):
                rec["sizes"] = fr.sizes.tolist()
            fh.write(json.dumps(rec) + "\n")


def assemble_sequence(
    frames: list[FrameTokens],
    embedding: np.ndarray,
    instruction_len: int = 8,
    response_len: int = 0,
    seed: int = 0,
    instruction_ids=None,
    response_ids=None,
) -> TokenSequence:
    """``[BOS] + vision tokens + instruction tokens + response tokens``.

    BOS is vocabulary id 0; instruction/response ids are drawn from
    ``1 .. vocab-1`` with ``seed`` unless given explicitly.
    """
    vocab, dim = embedding.shape
    rng = Rng(seed, 23)
    if instruction_ids is None:
        instruction_ids = rng.integers(1, vocab, instruction_len)
    if response_ids is None:
        response_ids = rng.integers(1, vocab, response_len)
    for fr in frames:
        if fr.tokens.shape[1] != dim:
            raise ShapeError(f"frame {fr.index} has width {fr.tokens.shape[1]}, model expects {dim}")
    vision = np.vstack([fr.tokens for fr in frames]) if frames else np.zeros((0, dim))
    rows = [embedding[[0]], vision, embedding[np.asarray(instruction_ids, dtype=np.int64)],
            embedding[np.asarray(response_ids, dtype=np.int64)]]
    lengths = (1, vision.shape[0], len(instruction_ids), len(response_ids))
    return TokenSequence(np.vstack(rows), lengths, tuple(len(fr) for fr in frames))


def synthetic_sequence(model, frames: int, tokens_per_frame: int, seed: int = 0, instruction_len: int = 8,
                       response_len: int = 0, raw_tokens_per_frame: int | None = None) -> TokenSequence:
    """Synthetic frames, merged to ``tokens_per_frame`` when ``raw_tokens_per_frame`` is larger."""
    dim = model.config.hidden_dim
    raw = raw_tokens_per_frame or tokens_per_frame
    fr = synthetic_frames(frames, raw, dim, seed)
    if raw > tokens_per_frame:
        fr = project_frames(fr, tokens_per_frame)
    return assemble_sequence(fr, model.embedding, instruction_len, response_len, seed)
