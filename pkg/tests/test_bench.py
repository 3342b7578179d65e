import csv

import pytest

from hybridseq.bench import (
    ANALYTIC_COLUMNS, DECODE_COLUMNS, MEASURE_COLUMNS, analytic_cost, attention_macs, loglog_slope, mamba_macs,
    mamba_share, measured_scaling, mlp_macs, transv_macs,
)
from hybridseq.config import ATTENTION, ModelConfig
from hybridseq.model import HybridModel
from hybridseq.schemas import validate_csv
from hybridseq.tome import synthetic_sequence
from hybridseq.transv import parse_schedule

DESK_SCHEDULE = parse_schedule("uni_7_0.5-attn_39_0.9").remap(56, 14)


def test_closed_forms():
    assert attention_macs(10, 4) == 2 * 100 * 4 + 4 * 10 * 16
    assert mamba_macs(10, 4, 2, 3) == 2 * 10 * 16 + 2 * 10 * 4 * 2 * 3 + 10 * 4 * 2 + 3 * 10 * 3 * 4
    assert mlp_macs(10, 4, 4) == 2 * 10 * 4 * 16
    assert transv_macs(3, 5, 4) == 2 * 3 * 16 + 2 * 5 * 16 + 2 * 3 * 5 * 4


def test_doubling_length_quadruples_square_term():
    cfg = ModelConfig(layers="A A", hidden_dim=8, attn_heads=2, mamba_heads=2, vocab=16)
    a = analytic_cost(cfg, 10, 4, instruction_len=0, system_len=0)
    b = analytic_cost(cfg, 20, 4, instruction_len=0, system_len=0)
    assert b.attention_quadratic_macs == 4 * a.attention_quadratic_macs


def test_mamba_term_linear():
    D, H, N = 64, 4, 16
    assert mamba_macs(2000, D, H, N) == 2 * mamba_macs(1000, D, H, N)


def test_compressed_total_below_baseline():
    cfg = ModelConfig()
    for frames in (1, 8, 64, 4096):
        base = analytic_cost(cfg, frames, 16)
        comp = analytic_cost(cfg, frames, 16, DESK_SCHEDULE)
        assert comp.total_macs < base.total_macs
        assert comp.kv_peak_rows < base.kv_peak_rows


def test_zero_frames():
    cfg = ModelConfig()
    rep = analytic_cost(cfg, 0, 16, DESK_SCHEDULE)
    base = analytic_cost(cfg, 0, 16)
    assert rep.vision_trajectory == [0] * 14
    assert rep.total_macs == base.total_macs
    assert all(row["macs_transv"] == 0 for row in rep.layers)


def test_attention_only_square_term_dominates():
    cfg = ModelConfig(layers="A A A A")
    rep = analytic_cost(cfg, 512, 16)
    assert rep.attention_quadratic_macs > 0.9 * rep.total_macs


def test_mamba_only_config_has_no_square_term():
    rep = analytic_cost(ModelConfig(layers="M " * 14), 2048, 16)
    assert rep.attention_quadratic_macs == 0
    by_kind = rep.macs_by_kind()
    assert mamba_share(rep) == by_kind["mamba2"] / rep.total_macs > 0.3


@pytest.mark.parametrize("schedule", ["none", "uni_1_0.5", "uni_0_0.3-attn_1_0.5-uni_3_1.0", "attn_3_0.7"])
def test_trajectory_matches_model(schedule, toy_model):
    seq = synthetic_sequence(toy_model, 5, 8, seed=0, instruction_len=4)
    _, trace = toy_model.forward(seq, schedule)
    rep = analytic_cost(toy_model.config, 5, 8, parse_schedule(schedule), instruction_len=4)
    assert rep.trajectory == [sum(c.values()) for c in trace.token_counts()]
    assert rep.vision_trajectory == [c["vision"] for c in trace.token_counts()]
    _, stats = toy_model.generate(seq, 1, schedule)
    assert stats.prefill_kv_rows == rep.kv_rows
    assert stats.prefill_ssm_state_bytes == rep.ssm_state_bytes


def test_desk_trajectory_matches_model():
    model = HybridModel(ModelConfig())
    seq = synthetic_sequence(model, 8, 16, seed=0)
    _, trace = model.forward(seq, DESK_SCHEDULE)
    rep = analytic_cost(model.config, 8, 16, DESK_SCHEDULE)
    assert rep.trajectory == [sum(c.values()) for c in trace.token_counts()]
    assert rep.vision_trajectory[2] == 64 and rep.vision_trajectory[10] == 6


def test_loglog_slope():
    xs = [1, 2, 4, 8]
    assert loglog_slope(xs, [3 * x ** 1.5 for x in xs]) == pytest.approx(1.5, abs=1e-12)


def _write(rows, cols, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def test_measure_schema(tmp_path, toy_model):
    rows, decode = measured_scaling(toy_model, [64, 128, 256, 512], parse_schedule("uni_1_0.5"), repeats=3,
                                    tokens_per_frame=2, decode_steps=2, instruction_len=4)
    assert len(rows) == 8
    assert [r["variant"] for r in rows] == ["baseline", "compressed"] * 4
    path = tmp_path / "measure.csv"
    _write(rows, MEASURE_COLUMNS, path)
    back = validate_csv(path, "measure")
    assert len({r["ssm_state_bytes"] for r in back}) == 1
    for r in back:
        assert r["kv_peak_rows"] == r["final_tokens"]
        assert r["repeats"] == 3
    dpath = tmp_path / "decode.csv"
    _write(decode, DECODE_COLUMNS, dpath)
    assert len(validate_csv(dpath, "decode")) == 8 * 2


def test_measure_prefill_only(toy_model):
    rows, decode = measured_scaling(toy_model, [4], parse_schedule("uni_1_0.5"), tokens_per_frame=4,
                                    decode_steps=0, instruction_len=4)
    assert decode == [] and rows[1]["final_tokens"] == 1 + 8 + 4
    assert rows[1]["kv_peak_rows"] == 13


def test_measure_needs_three_repeats(toy_model):
    with pytest.raises(ValueError):
        measured_scaling(toy_model, [4], parse_schedule("none"), repeats=2)


def test_analytic_rows_follow_schema(tmp_path):
    rep = analytic_cost(ModelConfig(), 16, 16, DESK_SCHEDULE)
    path = tmp_path / "analytic.csv"
    _write(rep.layers, ANALYTIC_COLUMNS, path)
    rows = validate_csv(path, "analytic")
    assert sum(r["macs"] for r in rows) + 64 * 256 == rep.total_macs
    assert [r["kv_rows"] for r in rows if r["kind"] == ATTENTION] == [rep.kv_rows[3], rep.kv_rows[10]]
