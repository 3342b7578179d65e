"""Model configuration and its INI-style config file.

Config files use :mod:`configparser` syntax with a single ``[model]`` section::

    [model]
    # one letter per layer: M = mamba2, A = attention, F = standalone MLP
    layers = M M M A M M M M M M A M M M
    hidden_dim = 64
    ssm_state = 16
    attn_heads = 4
    mamba_heads = 4
    vocab = 256
    seed = 0
    # append an MLP sublayer to every mamba2/attention layer
    fused_mlp = true
    mlp_ratio = 4
    # TransV cross-attention source: retained | dropped
    transfer_source = retained

``layers`` also accepts the long names (``mamba2, attention, mlp``),
comma- or space-separated.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigError

MAMBA, ATTENTION, MLP = "mamba2", "attention", "mlp"
LAYER_KINDS = (MAMBA, ATTENTION, MLP)
_LETTERS = {"M": MAMBA, "A": ATTENTION, "F": MLP}
TRANSFER_SOURCES = ("retained", "dropped")

CONFIG_ENV_VAR = "HYBRIDSEQ_CONFIG"
DESK_PATTERN = "M M M A M M M M M M A M M M"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    index: int


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    tokens = text.replace(",", " ").split()
    kinds = []
    for tok in tokens:
        if tok in LAYER_KINDS:
            kinds.append(tok)
        elif tok.upper() in _LETTERS and len(tok) == 1:
            kinds.append(_LETTERS[tok.upper()])
        else:
            raise ConfigError(f"unknown layer kind {tok!r}")
    return tuple(LayerSpec(kind, i) for i, kind in enumerate(kinds))


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...] = field(default_factory=lambda: parse_layers(DESK_PATTERN))
    hidden_dim: int = 64
    ssm_state: int = 16
    attn_heads: int = 4
    mamba_heads: int = 4
    vocab: int = 256
    seed: int = 0
    fused_mlp: bool = True
    mlp_ratio: int = 4
    transfer_source: str = "retained"

    def __post_init__(self):
        layers = tuple(self.layers)
        if isinstance(self.layers, str):
            layers = parse_layers(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigError("model needs at least one layer")
        for i, spec in enumerate(layers):
            if spec.index != i:
                raise ConfigError(f"layer indices must be contiguous from 0; position {i} has index {spec.index}")
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
        for name in ("hidden_dim", "ssm_state", "attn_heads", "mamba_heads", "vocab", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.attn_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by attn_heads {self.attn_heads}")
        if self.hidden_dim % self.mamba_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by mamba_heads {self.mamba_heads}")
        if self.transfer_source not in TRANSFER_SOURCES:
            raise ConfigError(f"transfer_source must be one of {TRANSFER_SOURCES}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def kinds(self) -> list[str]:
        return [spec.kind for spec in self.layers]

    def indices_of(self, kind: str) -> list[int]:
        return [spec.index for spec in self.layers if spec.kind == kind]

    def with_layers(self, text: str) -> "ModelConfig":
        return replace(self, layers=parse_layers(text))

    def to_text(self) -> str:
        letters = {v: k for k, v in _LETTERS.items()}
        lines = ["[model]", "layers = " + " ".join(letters[k] for k in self.kinds)]
        for name in ("hidden_dim", "ssm_state", "attn_heads", "mamba_heads", "vocab", "seed", "mlp_ratio"):
            lines.append(f"{name} = {getattr(self, name)}")
        lines.append(f"fused_mlp = {str(self.fused_mlp).lower()}")
        lines.append(f"transfer_source = {self.transfer_source}")
        return "\n".join(lines) + "\n"


_INT_KEYS = ("hidden_dim", "ssm_state", "attn_heads", "mamba_heads", "vocab", "seed", "mlp_ratio")


def parse_config(text: str) -> ModelConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if "model" not in parser:
        raise ConfigError("config needs a [model] section")
    sec = parser["model"]
    known = set(_INT_KEYS) | {"layers", "fused_mlp", "transfer_source"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    if "layers" in sec:
        kwargs["layers"] = parse_layers(sec["layers"])
    for key in _INT_KEYS:
        if key in sec:
            try:
                kwargs[key] = sec.getint(key)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {sec[key]!r}") from None
    if "fused_mlp" in sec:
        try:
            kwargs["fused_mlp"] = sec.getboolean("fused_mlp")
        except ValueError:
            raise ConfigError(f"fused_mlp must be a boolean, got {sec['fused_mlp']!r}") from None
    if "transfer_source" in sec:
        kwargs["transfer_source"] = sec["transfer_source"]
    return ModelConfig(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> ModelConfig:
    """Read a config file; ``None`` falls back to ``$HYBRIDSEQ_CONFIG`` and then the shipped desk config."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        text = resources.files("hybridseq").joinpath("configs/desk.cfg").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
