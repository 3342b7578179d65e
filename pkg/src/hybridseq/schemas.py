"""Column schemas for every CSV the command line writes, and a validator."""

from __future__ import annotations

import csv

from .errors import HybridSeqError


class SchemaError(HybridSeqError):
    """A CSV does not match its documented columns or types."""


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _trajectory(text: str) -> list[int]:
    return [int(t) for t in text.split(";")]


SCHEMAS: dict[str, dict] = {
    "trace": {"layer": int, "kind": str, "total": int, "system": int, "vision": int, "instruction": int,
              "response": int},
    "generate": {"step": int, "token": int, "kv_rows": int, "ssm_state_bytes": int, "seconds": float},
    "block": {"mode": str, "from_layer": int, "target": str, "probe": str, "blocked": float, "unblocked": float},
    "categories": {"layer": int, "kind": str, "source": str, "target": str, "score": _opt_float},
    "sweep": {"layer": int, "rate": float, "mode": str, "divergence_logits": float, "divergence_hidden": float,
              "cosine_logits": float, "cosine_hidden": float, "vision_tokens_after": int},
    "segments": {"kind": str, "index": int, "start": int, "stop": int},
    "analytic": {"layer": int, "kind": str, "tokens": int, "vision_tokens": int, "macs_mixer": int,
                 "macs_mlp": int, "macs_transv": int, "macs": int, "kv_rows": int, "ssm_state_values": int},
    "measure": {"frames": int, "variant": str, "schedule": str, "tokens": int, "final_tokens": int,
                "repeats": int, "prefill_median_s": float, "prefill_min_s": float,
                "decode_step_median_s": _opt_float, "kv_peak_rows": int, "ssm_state_bytes": int,
                "analytic_macs": int, "token_trajectory": _trajectory},
    "decode": {"frames": int, "variant": str, "step": int, "seconds": float, "kv_rows": int,
               "ssm_state_bytes": int},
}


def columns(name: str) -> list[str]:
    return list(SCHEMAS[name])


def validate_csv(path, name: str) -> list[dict]:
    """Parse ``path`` with schema ``name``; returns typed rows or raises :class:`SchemaError`."""
    schema = SCHEMAS[name]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(schema):
            raise SchemaError(f"{path}: columns {reader.fieldnames} do not match {name} schema {list(schema)}")
        rows = []
        for n, raw in enumerate(reader, 2):
            try:
                rows.append({k: conv(raw[k]) for k, conv in schema.items()})
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{n}: {exc}") from None
    return rows
