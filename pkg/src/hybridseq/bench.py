"""Prefill cost accounting: closed-form MAC counts and wall-clock measurement.

MAC conventions (one multiply-accumulate per scalar product term; softmax,
normalization, activations, residual adds and the decay sigmoid are not
counted), for a layer processing T tokens at width D:

* attention: ``4*T*D^2`` for the Q/K/V/O projections plus ``2*T^2*D`` for
  scores and mixing. The square is counted in full (no causal halving).
* mamba2: ``2*T*D^2`` (in/out projections) + ``2*T*D*H*N`` (B and C) +
  ``T*D*H`` (decay logits) + ``3*T*N*D`` (state update and readout).
* mlp: ``2*T*D*(ratio*D)``.
* compression step with T1 instruction and K source tokens:
  ``2*T1*D^2 + 2*K*D^2 + 2*T1*K*D`` (counted as if the gate were open).
* output head: ``D*vocab`` for the last position only.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ATTENTION, MAMBA, MLP, ModelConfig
from .model import HybridModel
from .tome import synthetic_sequence
from .transv import CompressionSchedule, drop_count

FLOAT_BYTES = 8

ANALYTIC_COLUMNS = [
    "layer", "kind", "tokens", "vision_tokens", "macs_mixer", "macs_mlp", "macs_transv", "macs",
    "kv_rows", "ssm_state_values",
]
MEASURE_COLUMNS = [
    "frames", "variant", "schedule", "tokens", "final_tokens", "repeats", "prefill_median_s",
    "prefill_min_s", "decode_step_median_s", "kv_peak_rows", "ssm_state_bytes", "analytic_macs",
    "token_trajectory",
]
DECODE_COLUMNS = ["frames", "variant", "step", "seconds", "kv_rows", "ssm_state_bytes"]


def attention_macs(T: int, D: int) -> int:
    return 4 * T * D * D + 2 * T * T * D


def mamba_macs(T: int, D: int, heads: int, state: int) -> int:
    return 2 * T * D * D + 2 * T * D * heads * state + T * D * heads + 3 * T * state * D


def mlp_macs(T: int, D: int, ratio: int) -> int:
    return 2 * T * D * ratio * D


def transv_macs(n_instruction: int, n_source: int, D: int) -> int:
    return 2 * n_instruction * D * D + 2 * n_source * D * D + 2 * n_instruction * n_source * D


@dataclass
class CostReport:
    layers: list[dict] = field(default_factory=list)
    total_macs: int = 0
    attention_quadratic_macs: int = 0
    kv_rows: dict[int, int] = field(default_factory=dict)
    kv_bytes: int = 0
    ssm_state_bytes: int = 0
    trajectory: list[int] = field(default_factory=list)
    vision_trajectory: list[int] = field(default_factory=list)
    prefill_seconds: float | None = None
    decode_step_seconds: list[float] = field(default_factory=list)

    @property
    def kv_peak_rows(self) -> int:
        return max(self.kv_rows.values(), default=0)

    def macs_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for row in self.layers:
            out[row["kind"]] = out.get(row["kind"], 0) + row["macs_mixer"]
        out["mlp_sublayers"] = sum(row["macs_mlp"] for row in self.layers)
        out["transv"] = sum(row["macs_transv"] for row in self.layers)
        return out


def analytic_cost(config: ModelConfig, frames: int, tokens_per_frame: int,
                  schedule: CompressionSchedule | None = None, instruction_len: int = 8,
                  system_len: int = 1, response_len: int = 0, transfer_source: str | None = None) -> CostReport:
    """Closed-form prefill cost; the token trajectory follows the compression length law."""
    schedule = schedule or CompressionSchedule()
    schedule.check_layers(config.n_layers)
    source_mode = transfer_source or config.transfer_source
    D, V = config.hidden_dim, config.vocab
    vision = frames * tokens_per_frame
    fixed = system_len + instruction_len + response_len
    rep = CostReport()
    for spec in config.layers:
        tv = schedule.at(spec.index)
        macs_transv = 0
        if tv is not None and vision > 0:
            dropped = drop_count(tv.rate, vision)
            source = vision - dropped if source_mode == "retained" else dropped
            if source:
                macs_transv = transv_macs(instruction_len, source, D)
            vision -= dropped
        T = fixed + vision
        if spec.kind == ATTENTION:
            mixer = attention_macs(T, D)
            rep.attention_quadratic_macs += 2 * T * T * D
            rep.kv_rows[spec.index] = T
        elif spec.kind == MAMBA:
            mixer = mamba_macs(T, D, config.mamba_heads, config.ssm_state)
        else:
            mixer = mlp_macs(T, D, config.mlp_ratio)
        mlp = mlp_macs(T, D, config.mlp_ratio) if config.fused_mlp and spec.kind != MLP else 0
        total = mixer + mlp + macs_transv
        rep.layers.append({
            "layer": spec.index, "kind": spec.kind, "tokens": T, "vision_tokens": vision,
            "macs_mixer": mixer, "macs_mlp": mlp, "macs_transv": macs_transv, "macs": total,
            "kv_rows": T if spec.kind == ATTENTION else 0,
            "ssm_state_values": config.ssm_state * D if spec.kind == MAMBA else 0,
        })
        rep.total_macs += total
        rep.trajectory.append(T)
        rep.vision_trajectory.append(vision)
    rep.total_macs += D * V
    rep.kv_bytes = sum(2 * rows * D * FLOAT_BYTES for rows in rep.kv_rows.values())
    rep.ssm_state_bytes = len(config.indices_of(MAMBA)) * config.ssm_state * D * FLOAT_BYTES
    return rep


def mamba_share(report: CostReport) -> float:
    """Fraction of total MACs spent in Mamba mixers."""
    return report.macs_by_kind().get(MAMBA, 0) / report.total_macs


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def measured_scaling(model: HybridModel, frame_grid, schedule: CompressionSchedule, repeats: int = 3,
                     tokens_per_frame: int = 16, decode_steps: int = 4, instruction_len: int = 8,
                     seed: int = 0, variants=("baseline", "compressed")):
    """Median wall-clock prefill per grid point, without and with ``schedule``.

    Frames are synthetic and already at the ``tokens_per_frame`` budget.
    Returns ``(rows, decode_rows)``; ``decode_rows`` is the per-step decode
    time series of the first repeat. Runs are sequential so timings are not
    skewed by contention.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    plans = {"baseline": CompressionSchedule(), "compressed": schedule}
    rows, decode_rows = [], []
    for frames in frame_grid:
        seq = synthetic_sequence(model, int(frames), tokens_per_frame, seed=seed, instruction_len=instruction_len)
        for variant in variants:
            sched = plans[variant]
            prefill, decode, trajectories = [], [], []
            for rep in range(repeats):
                if decode_steps:
                    _, stats = model.generate(seq, decode_steps, sched, strict=False)
                    prefill.append(stats.prefill_seconds)
                    decode.extend(stats.step_seconds)
                    counts, kv, ssm_bytes = stats.token_counts, stats.prefill_kv_rows, stats.prefill_ssm_state_bytes
                    if rep == 0:
                        for row in stats.rows():
                            decode_rows.append({"frames": frames, "variant": variant, **row})
                else:
                    t = time.perf_counter()
                    _, trace = model.forward(seq, sched, strict=False, last_only=True)
                    prefill.append(time.perf_counter() - t)
                    counts, kv, ssm_bytes = trace.token_counts(), _kv_rows(trace), _ssm_bytes(model)
                trajectories.append([sum(c.values()) for c in counts])
            if any(t != trajectories[0] for t in trajectories):
                raise RuntimeError(f"token trajectory changed across repeats at {frames} frames ({variant})")
            report = analytic_cost(model.config, int(frames), tokens_per_frame, sched, instruction_len)
            rows.append({
                "frames": int(frames), "variant": variant, "schedule": str(sched), "tokens": seq.T,
                "final_tokens": trajectories[0][-1], "repeats": repeats,
                "prefill_median_s": statistics.median(prefill), "prefill_min_s": min(prefill),
                "decode_step_median_s": statistics.median(decode) if decode else "",
                "kv_peak_rows": max(kv.values(), default=0), "ssm_state_bytes": ssm_bytes,
                "analytic_macs": report.total_macs,
                "token_trajectory": ";".join(str(t) for t in trajectories[0]),
            })
    return rows, decode_rows


def _kv_rows(trace) -> dict[int, int]:
    return {rec.index: sum(rec.counts.values()) for rec in trace.records if rec.kind == ATTENTION}


def _ssm_bytes(model: HybridModel) -> int:
    cfg = model.config
    return len(cfg.indices_of(MAMBA)) * cfg.ssm_state * cfg.hidden_dim * FLOAT_BYTES
