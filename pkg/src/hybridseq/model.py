"""The hybrid Mamba-2 / attention stack, its forward pass and greedy decoding.

Every layer is pre-norm residual: ``h <- h + layer(rms_norm(h))``; with
``fused_mlp`` each Mamba/attention layer is followed by
``h <- h + mlp(rms_norm(h))``. Compression steps run on the residual stream
at the entry of their target layer. There are no positional embeddings in the
stack.
"""

from __future__ import annotations

import csv
import functools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionLayer, AttentionMask, KvCache
from .blocking import BlockingConfig
from .config import ATTENTION, MAMBA, MLP, ModelConfig
from .errors import MissingScoresError
from .sequence import INSTRUCTION, KINDS, RESPONSE, VISION, TokenSequence
from .ssm import MambaLayer, SsmState
from .tensor import Rng, check_finite, init_weight, rms_norm, silu
from .transv import CompressionSchedule, TransVParams, TransVSpec, drop_count, parse_schedule, transv_apply

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["layer", "kind", "total", *KINDS]


class MLPLayer:
    kind = "mlp"

    def __init__(self, rng: Rng, dim: int, ratio: int):
        self.w_up = init_weight(rng.child("mlp", 0), dim, ratio * dim)
        self.w_down = init_weight(rng.child("mlp", 1), ratio * dim, dim)
        self.w_up.setflags(write=False)
        self.w_down.setflags(write=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return silu(x @ self.w_up) @ self.w_down


@dataclass
class LayerRecord:
    index: int
    kind: str
    counts: dict[str, int]
    layout: TokenSequence | None = None
    transv: dict | None = None
    mixer: dict = field(default_factory=dict)
    hidden_out: np.ndarray | None = None


@dataclass
class CaptureTrace:
    """What a forward pass saw at every layer.

    ``records[i].counts`` is always filled. With capture enabled each record
    also holds the layer's input ``layout`` (a :class:`TokenSequence` over the
    residual stream at layer entry, after any compression step), the mixer
    internals and the residual output.
    """

    records: list[LayerRecord] = field(default_factory=list)
    captured: bool = False
    final_hidden: np.ndarray | None = None
    final_layout: TokenSequence | None = None

    def record(self, layer: int) -> LayerRecord:
        return self.records[layer]

    def token_counts(self) -> list[dict[str, int]]:
        return [rec.counts for rec in self.records]

    def rows(self) -> list[dict]:
        return [
            {"layer": rec.index, "kind": rec.kind, "total": sum(rec.counts.values()), **rec.counts}
            for rec in self.records
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())


@dataclass
class DecodeStats:
    kv_rows: list[dict[int, int]] = field(default_factory=list)
    ssm_state_bytes: list[int] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    prefill_kv_rows: dict[int, int] = field(default_factory=dict)
    prefill_ssm_state_bytes: int = 0
    prefill_seconds: float = 0.0
    token_counts: list[dict[str, int]] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for step, (rows, nbytes, secs) in enumerate(zip(self.kv_rows, self.ssm_state_bytes, self.step_seconds)):
            out.append({"step": step + 1, "kv_rows": sum(rows.values()), "ssm_state_bytes": nbytes, "seconds": secs})
        return out


@dataclass
class _RunState:
    ssm: SsmState
    kv: KvCache
    layout: TokenSequence


class HybridModel:
    """Seeded, immutable model built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = Rng(config.seed)
        D = config.hidden_dim
        self.embedding = rng.child("embedding").uniform(-1.0, 1.0, (config.vocab, D))
        self.embedding.setflags(write=False)
        self.mixers: list = []
        self.mlps: list[MLPLayer | None] = []
        self.transv_params: list[TransVParams] = []
        for spec in config.layers:
            lrng = Rng(config.seed, 100 + spec.index)
            if spec.kind == MAMBA:
                self.mixers.append(MambaLayer(lrng, D, config.mamba_heads, config.ssm_state))
            elif spec.kind == ATTENTION:
                self.mixers.append(AttentionLayer(lrng, D, config.attn_heads))
            else:
                self.mixers.append(MLPLayer(lrng, D, config.mlp_ratio))
            fused = config.fused_mlp and spec.kind != MLP
            self.mlps.append(MLPLayer(Rng(config.seed, 200 + spec.index), D, config.mlp_ratio) if fused else None)
            self.transv_params.append(TransVParams.init(Rng(config.seed, 300 + spec.index), D, config.attn_heads))

    @property
    def kinds(self) -> list[str]:
        return self.config.kinds

    def embed(self, ids) -> np.ndarray:
        return self.embedding[np.asarray(ids, dtype=np.int64)]

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return rms_norm(hidden) @ self.embedding.T

    def _mask(self, layer: int, blocking: BlockingConfig | None, q_labels, k_labels) -> AttentionMask:
        if blocking is not None and blocking.applies(layer):
            return AttentionMask(np.asarray(q_labels), np.asarray(k_labels), blocking.pairs)
        return AttentionMask()

    def _check(self, schedule: CompressionSchedule, blocking: BlockingConfig | None, strict: bool) -> None:
        schedule.check_layers(self.config.n_layers)
        if blocking is not None:
            blocking.check(self.kinds, strict)

    def _scores_for(self, spec: TransVSpec, layer: int, h: np.ndarray, layout: TokenSequence,
                    pending: np.ndarray | None, blocking, strict: bool):
        """Attention of the last instruction token over the current vision tokens, or a uni fallback."""
        if spec.mode != "attn" or drop_count(spec.rate, layout.lengths[VISION]) == 0:
            return spec, None
        if self.kinds[layer] == ATTENTION:
            labels = layout.labels()
            query = layout.span(INSTRUCTION).stop - 1
            row = self.mixers[layer].query_row(rms_norm(h), query, self._mask(layer, blocking, labels, labels))
            return spec, row[layout.span(VISION).slice]
        if pending is not None:
            return spec, pending
        if strict:
            raise MissingScoresError(f"{spec}: no attention layer at or before layer {layer} to supply scores")
        log.warning("%s: no attention scores available at layer %d, falling back to uniform dropping", spec, layer)
        return replace(spec, mode="uni"), None

    def _run(self, seq: TokenSequence, schedule, blocking, capture, strict, transv_params, last_only):
        cfg = self.config
        if seq.D != cfg.hidden_dim:
            raise ValueError(f"sequence width {seq.D} does not match hidden_dim {cfg.hidden_dim}")
        params = list(self.transv_params)
        for layer, p in (transv_params or {}).items():
            params[layer] = p
        h = np.array(seq.embeddings)
        layout = seq
        pending = None
        state = _RunState(SsmState(), KvCache(), seq)
        trace = CaptureTrace(captured=capture)
        for spec_l, mixer, mlp in zip(cfg.layers, self.mixers, self.mlps):
            i, kind = spec_l.index, spec_l.kind
            tv_info = None
            spec = schedule.at(i)
            if spec is not None:
                spec, scores = self._scores_for(spec, i, h, layout, pending, blocking, strict)
                before = layout.replace_embeddings(h) if capture else None
                new, kept, dropped = transv_apply(
                    layout.replace_embeddings(h), spec, params[i], scores, cfg.transfer_source, return_indices=True
                )
                layout, h = new, np.array(new.embeddings)
                if pending is not None and kept.size < pending.size:
                    pending = pending[kept]
                tv_info = {"spec": spec, "kept": kept, "dropped": dropped, "scores": scores, "before": before}
            rec = LayerRecord(i, kind, layout.counts(), transv=tv_info)
            if capture:
                rec.layout = layout.replace_embeddings(h)
            x = rms_norm(h)
            if kind == MAMBA:
                y, h_last = mixer.forward(x, None, rec.mixer if capture else None)
                state.ssm.h[i] = h_last
            elif kind == ATTENTION:
                labels = layout.labels()
                y, info, cache = mixer.forward(x, self._mask(i, blocking, labels, labels), None, labels, capture)
                state.kv.layers[i] = cache
                rec.mixer.update(info)
                ins = layout.span(INSTRUCTION)
                if len(ins):
                    # head-averaged row of the last instruction token, restricted to vision keys
                    pending = mixer.query_row(x, ins.stop - 1, self._mask(i, blocking, labels, labels))[
                        layout.span(VISION).slice
                    ]
            else:
                y = mixer.forward(x)
            h += y
            if mlp is not None:
                h += mlp.forward(rms_norm(h))
            check_finite(h, f"layer {i} ({kind})")
            if capture:
                rec.hidden_out = h.copy()
            trace.records.append(rec)
        trace.final_hidden = h
        trace.final_layout = layout.replace_embeddings(h)
        state.layout = layout
        logits = self.logits(h[-1:] if last_only else h)
        return logits, trace, state

    def forward(
        self,
        seq: TokenSequence,
        schedule: CompressionSchedule | str | None = None,
        blocking: BlockingConfig | None = None,
        capture: bool = False,
        strict: bool = True,
        transv_params: dict[int, TransVParams] | None = None,
        last_only: bool = False,
    ):
        """Prefill ``seq``; returns ``(logits, trace)``.

        ``logits`` is (T_final x vocab), or 1 x vocab with ``last_only``;
        T_final is the length after compression. ``transv_params`` overrides
        the per-layer compression parameters (e.g. a non-zero gate).
        """
        schedule = _as_schedule(schedule)
        self._check(schedule, blocking, strict)
        logits, trace, _ = self._run(seq, schedule, blocking, capture, strict, transv_params, last_only)
        return logits, trace

    def _decode_step(self, token: int, state: _RunState, blocking) -> np.ndarray:
        h = self.embed([token])
        resp = np.array([RESPONSE])
        for spec_l, mixer, mlp in zip(self.config.layers, self.mixers, self.mlps):
            i, kind = spec_l.index, spec_l.kind
            x = rms_norm(h)
            if kind == MAMBA:
                y, state.ssm.h[i] = mixer.forward(x, state.ssm.h[i])
            elif kind == ATTENTION:
                cache = state.kv.layers[i]
                mask = self._mask(i, blocking, resp, np.concatenate([cache.labels, resp]))
                y, _, state.kv.layers[i] = mixer.forward(x, mask, cache, resp)
            else:
                y = mixer.forward(x)
            h = h + y
            if mlp is not None:
                h = h + mlp.forward(rms_norm(h))
        state.layout = state.layout.append_response(self.embed([token]))
        return self.logits(h)[0]

    def generate(
        self,
        seq: TokenSequence,
        steps: int,
        schedule: CompressionSchedule | str | None = None,
        blocking: BlockingConfig | None = None,
        strict: bool = True,
        transv_params: dict[int, TransVParams] | None = None,
    ):
        """Greedy decoding.

        Each step appends the current argmax token to the response span
        (one new row in every KV cache) and computes the next distribution.
        Returns ``(tokens, stats)``: the ``steps`` appended ids and a
        :class:`DecodeStats`.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        schedule = _as_schedule(schedule)
        self._check(schedule, blocking, strict)
        t0 = time.perf_counter()
        logits, trace, state = self._run(seq, schedule, blocking, False, strict, transv_params, True)
        stats = DecodeStats(
            token_counts=trace.token_counts(),
            prefill_kv_rows=state.kv.row_counts(),
            prefill_ssm_state_bytes=state.ssm.nbytes,
            prefill_seconds=time.perf_counter() - t0,
        )
        nxt = int(np.argmax(logits[-1]))
        tokens = []
        for _ in range(steps):
            t = time.perf_counter()
            tokens.append(nxt)
            row = self._decode_step(nxt, state, blocking)
            stats.step_seconds.append(time.perf_counter() - t)
            stats.kv_rows.append(state.kv.row_counts())
            stats.ssm_state_bytes.append(state.ssm.nbytes)
            stats.logits.append(row)
            nxt = int(np.argmax(row))
        return tokens, stats


def _as_schedule(schedule) -> CompressionSchedule:
    if isinstance(schedule, CompressionSchedule):
        return schedule
    return parse_schedule(schedule)


@functools.lru_cache(maxsize=8)
def build_model(config: ModelConfig) -> HybridModel:
    return HybridModel(config)


def model_forward(seq, config: ModelConfig, schedule=None, blocking=None, **kwargs):
    return build_model(config).forward(seq, schedule, blocking, **kwargs)


def generate(seq, config: ModelConfig, steps: int, **kwargs):
    return build_model(config).generate(seq, steps, **kwargs)
