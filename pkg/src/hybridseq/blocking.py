"""Information-blocking masks for attention layers.

``v2i`` cuts instruction queries off from vision keys, ``v2r`` cuts response
queries off from vision keys. On a one-token-per-category toy
(vision, instruction, response) the kept entries are::

    v2i: [[1,0,0],[0,1,0],[1,1,1]]      v2r: [[1,0,0],[1,1,0],[0,1,1]]

Only attention layers are masked; Mamba layers are left as they are, so
information can still leak through the recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlockingError
from .sequence import INSTRUCTION, RESPONSE, VISION, TokenSequence

BLOCK_MODES = {"v2i": ((INSTRUCTION, VISION),), "v2r": ((RESPONSE, VISION),)}


@dataclass(frozen=True)
class BlockingConfig:
    mode: str
    start_layer: int = 0
    only_layer: bool = False

    def __post_init__(self):
        if self.mode not in BLOCK_MODES:
            raise BlockingError(f"unknown blocking mode {self.mode!r}; expected v2i or v2r")
        if self.start_layer < 0:
            raise BlockingError(f"start layer {self.start_layer} is negative")

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return BLOCK_MODES[self.mode]

    def applies(self, layer: int) -> bool:
        return layer == self.start_layer if self.only_layer else layer >= self.start_layer

    def check(self, kinds: list[str], strict: bool = True) -> None:
        n = len(kinds)
        if self.start_layer >= n:
            raise BlockingError(f"blocking layer {self.start_layer} out of range for a {n}-layer stack")
        if not strict:
            return
        targets = [i for i in range(n) if self.applies(i)]
        if not any(kinds[i] == "attention" for i in targets):
            where = f"layer {self.start_layer}" if self.only_layer else f"layers >= {self.start_layer}"
            raise BlockingError(f"blocking targets {where}, which holds no attention layer")


def mask_from_labels(labels: np.ndarray, mode: str | None) -> np.ndarray:
    """Dense 0/1 causal mask over a label sequence with ``mode``'s pairs removed."""
    labels = np.asarray(labels)
    T = labels.shape[0]
    mask = np.tril(np.ones((T, T), dtype=np.int8))
    if mode is not None:
        for q_label, k_label in BLOCK_MODES[mode]:
            mask[np.ix_(labels == q_label, labels == k_label)] = 0
    return mask


def build_blocking_mask(seq: TokenSequence, mode: str) -> np.ndarray:
    if mode not in BLOCK_MODES:
        raise BlockingError(f"unknown blocking mode {mode!r}; expected v2i or v2r")
    return mask_from_labels(seq.labels(), mode)
