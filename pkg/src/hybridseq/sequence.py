"""Segment-labelled token sequences.

Layout is always ``system | vision | instruction | response`` with the BOS
token at position 0 inside the system span. Spans are contiguous, so a
sequence is fully described by four lengths plus the per-frame split of the
vision span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SegmentError, ShapeError

SYSTEM, VISION, INSTRUCTION, RESPONSE = 0, 1, 2, 3
KINDS = ("system", "vision", "instruction", "response")
KIND_CODES = {name: code for code, name in enumerate(KINDS)}


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class TokenSequence:
    embeddings: np.ndarray
    lengths: tuple[int, int, int, int]
    frame_lengths: tuple[int, ...] = field(default=())

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ShapeError(f"embeddings must be T x D, got {emb.shape}")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        lengths = tuple(int(n) for n in self.lengths)
        if len(lengths) != 4 or min(lengths) < 0:
            raise SegmentError(f"need four non-negative span lengths, got {self.lengths}")
        if lengths[SYSTEM] < 1:
            raise SegmentError("system span must hold the BOS token at position 0")
        if sum(lengths) != emb.shape[0]:
            raise SegmentError(f"spans cover {sum(lengths)} positions but embeddings have {emb.shape[0]} rows")
        frames = tuple(int(n) for n in self.frame_lengths)
        if not frames and lengths[VISION]:
            frames = (lengths[VISION],)
        if sum(frames) != lengths[VISION] or any(n < 0 for n in frames):
            raise SegmentError(f"frame lengths {frames} do not tile a vision span of {lengths[VISION]}")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "frame_lengths", frames)

    @property
    def T(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    def span(self, kind: str | int) -> Segment:
        code = KIND_CODES[kind] if isinstance(kind, str) else kind
        start = sum(self.lengths[:code])
        return Segment(KINDS[code], start, start + self.lengths[code])

    @property
    def segments(self) -> list[Segment]:
        return [self.span(code) for code in range(4)]

    @property
    def frame_spans(self) -> list[tuple[int, int]]:
        out, pos = [], self.lengths[SYSTEM]
        for n in self.frame_lengths:
            out.append((pos, pos + n))
            pos += n
        return out

    def labels(self) -> np.ndarray:
        """Integer category code per position."""
        return np.repeat(np.arange(4), self.lengths)

    def counts(self) -> dict[str, int]:
        return dict(zip(KINDS, self.lengths))

    def replace_embeddings(self, embeddings: np.ndarray) -> "TokenSequence":
        return TokenSequence(embeddings, self.lengths, self.frame_lengths)

    def frame_of_vision(self) -> np.ndarray:
        """Frame index of each vision token, in order."""
        return np.repeat(np.arange(len(self.frame_lengths)), self.frame_lengths)

    def append_response(self, rows: np.ndarray) -> "TokenSequence":
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        sys_, vis, ins, res = self.lengths
        return TokenSequence(
            np.vstack([self.embeddings, rows]), (sys_, vis, ins, res + rows.shape[0]), self.frame_lengths
        )

    def keep_vision(self, kept: np.ndarray, embeddings: np.ndarray | None = None) -> "TokenSequence":
        """Drop every vision token whose vision-local index is not in ``kept``.

        ``embeddings`` (full T x D, pre-drop) may supply updated rows for the
        non-vision spans; by default the current ones are used.
        """
        kept = np.asarray(kept, dtype=np.int64)
        src = self.embeddings if embeddings is None else np.asarray(embeddings, dtype=np.float64)
        vis = self.span(VISION)
        keep_rows = np.concatenate(
            [np.arange(vis.start), vis.start + kept, np.arange(vis.stop, self.T)]
        ).astype(np.int64)
        frame_ids = self.frame_of_vision()[kept]
        frames = tuple(np.bincount(frame_ids, minlength=len(self.frame_lengths)).tolist())
        sys_, _, ins, res = self.lengths
        return TokenSequence(src[keep_rows], (sys_, len(kept), ins, res), frames)
