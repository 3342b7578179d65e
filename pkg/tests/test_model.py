import json
from pathlib import Path

import numpy as np
import pytest

from conftest import small_config
from hybridseq.attention import AttentionMask
from hybridseq.blocking import BlockingConfig
from hybridseq.config import ATTENTION, MAMBA
from hybridseq.errors import BlockingError, LayerRangeError, MissingScoresError
from hybridseq.model import HybridModel, build_model, generate, model_forward
from hybridseq.sequence import INSTRUCTION, VISION
from hybridseq.tensor import rms_norm
from hybridseq.tome import synthetic_sequence
from hybridseq.transv import TransVSpec, parse_schedule, transv_apply

GOLDEN = Path(__file__).parent / "golden" / "generate_toy.json"


def test_empty_schedule_keeps_counts(toy_model, toy_seq):
    _, trace = toy_model.forward(toy_seq)
    assert all(c == toy_seq.counts() for c in trace.token_counts())


def test_uniform_schedule_halves_vision(toy_model):
    seq = synthetic_sequence(toy_model, 4, 8, seed=2, instruction_len=4)
    _, trace = toy_model.forward(seq, "uni_1_0.5")
    counts = [c["vision"] for c in trace.token_counts()]
    assert counts == [32, 16, 16, 16]


def test_forward_is_deterministic(toy_config, toy_seq):
    a, _ = HybridModel(toy_config).forward(toy_seq)
    b, _ = HybridModel(toy_config).forward(toy_seq)
    assert np.array_equal(a, b)


def test_functional_forms(toy_config, toy_seq):
    logits, _ = model_forward(toy_seq, toy_config)
    assert np.array_equal(logits, build_model(toy_config).forward(toy_seq)[0])
    tokens, _ = generate(toy_seq, toy_config, 2)
    assert len(tokens) == 2


@pytest.mark.parametrize("layers", ["M A M A", "A A", "M M"])
@pytest.mark.parametrize("seed", range(3))
def test_causality_is_exact(layers, seed):
    model = HybridModel(small_config(layers))
    seq = synthetic_sequence(model, 3, 8, seed=seed, instruction_len=4, response_len=2)
    logits, _ = model.forward(seq)
    rng = np.random.default_rng(seed)
    for t in (0, 5, seq.T - 2):
        emb = np.array(seq.embeddings)
        emb[t + 1:] += rng.normal(size=emb[t + 1:].shape)
        other, _ = model.forward(seq.replace_embeddings(emb))
        assert np.array_equal(logits[:t + 1], other[:t + 1])
        assert not np.array_equal(logits[t + 1:], other[t + 1:])


def test_last_only_matches_full(toy_model, toy_seq):
    full, _ = toy_model.forward(toy_seq)
    last, _ = toy_model.forward(toy_seq, last_only=True)
    assert np.max(np.abs(full[-1:] - last)) < 1e-12


@pytest.mark.parametrize("schedule", ["none", "uni_1_0.5", "uni_0_0.25-attn_3_0.5"])
def test_decode_matches_full_rerun(toy_model, toy_seq, schedule):
    tokens, stats = toy_model.generate(toy_seq, 5, schedule)
    seq = toy_seq.append_response(toy_model.embed(tokens))
    full, _ = toy_model.forward(seq, schedule)
    n = full.shape[0] - len(tokens)
    for step, row in enumerate(stats.logits):
        assert np.max(np.abs(full[n + step] - row)) <= 1e-9
    assert tokens[0] == int(np.argmax(toy_model.forward(toy_seq, schedule, last_only=True)[0][-1]))


def test_generate_cache_growth(toy_model, toy_seq):
    _, stats = toy_model.generate(toy_seq, 16)
    for layer in toy_model.config.indices_of(ATTENTION):
        assert stats.kv_rows[-1][layer] - stats.prefill_kv_rows[layer] == 16
        assert [r[layer] for r in stats.kv_rows] == list(range(toy_seq.T + 1, toy_seq.T + 17))
    assert set(stats.ssm_state_bytes) == {stats.prefill_ssm_state_bytes}


def test_generate_one_step(toy_model, toy_seq):
    tokens, stats = toy_model.generate(toy_seq, 1)
    assert len(tokens) == 1 and len(stats.logits) == 1


def test_generate_rejects_zero_steps(toy_model, toy_seq):
    with pytest.raises(ValueError):
        toy_model.generate(toy_seq, 0)


def test_ssm_state_size_independent_of_length(toy_model):
    sizes = set()
    for frames in (1, 4, 16):
        seq = synthetic_sequence(toy_model, frames, 8, seed=0, instruction_len=4)
        sizes.add(toy_model.generate(seq, 1)[1].prefill_ssm_state_bytes)
    assert len(sizes) == 1


def test_generate_golden_tokens(toy_model, toy_seq):
    tokens, _ = toy_model.generate(toy_seq, 12, "uni_1_0.5")
    golden = json.loads(GOLDEN.read_text())
    assert tokens == golden["tokens"]


def test_schedule_out_of_range(toy_model, toy_seq):
    with pytest.raises(LayerRangeError, match="layer 9"):
        toy_model.forward(toy_seq, "uni_9_0.5")


def test_blocking_on_mamba_only_layer_is_strict(toy_seq):
    model = HybridModel(small_config("M A M A"))
    with pytest.raises(BlockingError):
        model.forward(toy_seq, blocking=BlockingConfig("v2i", 0, only_layer=True))
    model.forward(toy_seq, blocking=BlockingConfig("v2i", 0, only_layer=True), strict=False)


def test_attn_mode_without_scores(toy_seq):
    model = HybridModel(small_config("M M A"))
    with pytest.raises(MissingScoresError):
        model.forward(toy_seq, "attn_0_0.5")
    _, trace = model.forward(toy_seq, "attn_0_0.5", strict=False)
    assert trace.token_counts()[0]["vision"] == 16


def test_attn_mode_uses_earlier_attention_layer(toy_seq):
    model = HybridModel(small_config("A M M"))
    _, trace = model.forward(toy_seq, "attn_2_0.5", capture=True)
    x = rms_norm(trace.records[0].layout.embeddings)
    row = model.mixers[0].query_row(x, toy_seq.span(INSTRUCTION).stop - 1)
    expect = row[toy_seq.span(VISION).slice]
    assert np.array_equal(trace.records[2].transv["scores"], expect)


def _manual_stack(model, seq, schedule, params):
    """Residual loop written out by hand, with transv_apply called between layers."""
    h, layout = np.array(seq.embeddings), seq
    for spec_l, mixer, mlp in zip(model.config.layers, model.mixers, model.mlps):
        i = spec_l.index
        tv = schedule.at(i)
        if tv is not None:
            cur = layout.replace_embeddings(h)
            scores = None
            if tv.mode == "attn":
                assert spec_l.kind == ATTENTION
                row = mixer.query_row(rms_norm(h), cur.span(INSTRUCTION).stop - 1)
                scores = row[cur.span(VISION).slice]
            layout = transv_apply(cur, tv, params[i], scores)
            h = np.array(layout.embeddings)
        x = rms_norm(h)
        if spec_l.kind == MAMBA:
            y, _ = mixer.forward(x)
        elif spec_l.kind == ATTENTION:
            y, _, _ = mixer.forward(x, AttentionMask())
        else:
            y = mixer.forward(x)
        h = h + y
        if mlp is not None:
            h = h + mlp.forward(rms_norm(h))
    return h


@pytest.mark.parametrize("text", ["uni_1_0.5", "uni_0_0.25-attn_3_0.5", "attn_1_0.3-uni_2_0.6-uni_3_1"])
def test_schedule_composition(toy_model, toy_seq, text):
    schedule = parse_schedule(text)
    params = {i: p.with_alpha(0.7) for i, p in enumerate(toy_model.transv_params)}
    _, trace = toy_model.forward(toy_seq, schedule, transv_params=params)
    manual = _manual_stack(toy_model, toy_seq, schedule, params)
    assert manual.shape == trace.final_hidden.shape
    assert np.max(np.abs(manual - trace.final_hidden)) <= 1e-9


def test_capture_records_layouts(toy_model, toy_seq):
    _, trace = toy_model.forward(toy_seq, "uni_2_0.5", capture=True)
    rec = trace.records[2]
    assert rec.transv["spec"] == TransVSpec("uni", 2, 0.5)
    assert rec.layout.lengths[VISION] == 16
    assert trace.records[1].hidden_out.shape[0] == toy_seq.T


def test_trace_csv(tmp_path, toy_model, toy_seq):
    _, trace = toy_model.forward(toy_seq, "uni_1_0.5")
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,kind,total,system,vision,instruction,response"
    assert lines[2] == "1,attention,23,1,16,4,2"
