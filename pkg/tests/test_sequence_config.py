import numpy as np
import pytest

from hybridseq.config import ATTENTION, MAMBA, ModelConfig, load_config, parse_config
from hybridseq.errors import ConfigError, SegmentError, ShapeError
from hybridseq.sequence import TokenSequence


def test_spans_and_labels():
    seq = TokenSequence(np.zeros((10, 2)), (1, 5, 3, 1), (2, 3))
    assert seq.span("vision").start == 1 and seq.span("vision").stop == 6
    assert seq.labels().tolist() == [0, 1, 1, 1, 1, 1, 2, 2, 2, 3]
    assert seq.frame_spans == [(1, 3), (3, 6)]
    assert seq.frame_of_vision().tolist() == [0, 0, 1, 1, 1]


def test_embeddings_are_copied_and_frozen():
    emb = np.zeros((3, 2))
    seq = TokenSequence(emb, (1, 1, 1, 0))
    emb[0, 0] = 5.0
    assert seq.embeddings[0, 0] == 0.0
    with pytest.raises(ValueError):
        seq.embeddings[0, 0] = 1.0


@pytest.mark.parametrize(
    "shape,lengths,frames,exc",
    [
        ((3, 2), (0, 2, 1, 0), (), SegmentError),
        ((3, 2), (1, 1, 1, 1), (), SegmentError),
        ((3, 2), (1, 1, 1, 0), (2,), SegmentError),
        ((3,), (1, 1, 1, 0), (), ShapeError),
    ],
)
def test_invalid_sequences(shape, lengths, frames, exc):
    with pytest.raises(exc):
        TokenSequence(np.zeros(shape), lengths, frames)


def test_keep_vision_recomputes_frames():
    seq = TokenSequence(np.arange(14.0).reshape(7, 2), (1, 4, 2, 0), (2, 2))
    out = seq.keep_vision(np.array([1, 2]))
    assert out.lengths == (1, 2, 2, 0)
    assert out.frame_lengths == (1, 1)
    assert out.embeddings[1].tolist() == [4.0, 5.0]


def test_append_response():
    seq = TokenSequence(np.zeros((3, 2)), (1, 1, 1, 0))
    out = seq.append_response(np.ones(2))
    assert out.lengths == (1, 1, 1, 1)


def test_shipped_desk_config(monkeypatch):
    monkeypatch.delenv("HYBRIDSEQ_CONFIG", raising=False)
    cfg = load_config()
    assert cfg.n_layers == 14
    assert len(cfg.indices_of(MAMBA)) == 12 and len(cfg.indices_of(ATTENTION)) == 2
    assert (cfg.hidden_dim, cfg.ssm_state, cfg.attn_heads, cfg.vocab) == (64, 16, 4, 256)
    assert cfg.fused_mlp


def test_env_var_config(tmp_path, monkeypatch):
    path = tmp_path / "toy.cfg"
    path.write_text("[model]\nlayers = A A\nhidden_dim = 8\nattn_heads = 2\nmamba_heads = 2\n")
    monkeypatch.setenv("HYBRIDSEQ_CONFIG", str(path))
    assert load_config().kinds == [ATTENTION, ATTENTION]


def test_config_round_trip():
    cfg = ModelConfig(layers="M A F", hidden_dim=8, attn_heads=2, mamba_heads=2, vocab=16, fused_mlp=False)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nlayers = M X\n",
        "[model]\nhidden_dim = wide\n",
        "[model]\ndepth = 3\n",
        "[other]\n",
        "[model]\nhidden_dim = 10\nattn_heads = 4\n",
        "[model]\nfused_mlp = maybe\n",
        "[model]\ntransfer_source = both\n",
    ],
)
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
