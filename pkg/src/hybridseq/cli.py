"""Command-line entry point: ``hybridseq run | analyze | bench``.

Every CSV goes to ``--out`` (or stdout when omitted); column layouts are in
:mod:`hybridseq.schemas`. Usage errors exit with 2, runtime errors with 1.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

from . import bench, flow
from .blocking import BlockingConfig
from .config import ATTENTION, MAMBA, load_config
from .errors import HybridSeqError
from .model import build_model
from .schemas import columns
from .tome import assemble_sequence, project_frames, read_frames_jsonl, synthetic_sequence
from .transv import parse_schedule

log = logging.getLogger("hybridseq")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _count(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {n}")
    return n


def _common(p: argparse.ArgumentParser, response_len: int = 0) -> None:
    p.add_argument("--config", help="model config file (default: $HYBRIDSEQ_CONFIG, then the shipped desk config)")
    p.add_argument("--seed", type=int, default=0, help="input seed (model weights follow the config seed)")
    p.add_argument("--frames", type=_count, default=4)
    p.add_argument("--tokens-per-frame", type=_count, default=16)
    p.add_argument("--raw-tokens-per-frame", type=_count, default=None,
                   help="synthetic tokens per frame before merging down to --tokens-per-frame")
    p.add_argument("--input", help="JSONL frame file used instead of synthetic frames")
    p.add_argument("--instruction-len", type=_count, default=8)
    p.add_argument("--response-len", type=_count, default=response_len)
    p.add_argument("--schedule", default="none", help='compression schedule, e.g. "uni_2_0.5-attn_10_0.9"')
    p.add_argument("--remap-from", type=int, default=None, metavar="N",
                   help="rescale schedule layer indices written for an N-layer stack onto this config")
    p.add_argument("--lenient", action="store_true",
                   help="fall back to uniform dropping when attention scores are unavailable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridseq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="prefill plus greedy decoding, per-layer token counts")
    _common(run)
    run.add_argument("--steps", type=_count, default=4, help="decode steps (0 = prefill only)")
    run.add_argument("--capture", metavar="DIR", help="write trace.csv and generate.csv here")
    run.set_defaults(func=cmd_run)

    analyze = sub.add_parser("analyze", help="information-flow analysis")
    asub = analyze.add_subparsers(dest="analysis", required=True)
    block = asub.add_parser("block", help="vision-to-text sensitivity with and without blocking")
    _common(block, response_len=4)
    block.add_argument("--mode", choices=["v2i", "v2r"], required=True)
    block.add_argument("--from-layer", type=_count, default=0)
    block.add_argument("--only-layer", action="store_true", help="block only at --from-layer")
    block.add_argument("--eps", type=float, default=1e-3)
    block.add_argument("--directions", type=_count, default=4)
    block.add_argument("--out")
    scores = asub.add_parser("scores", help="T x T score matrix of one head plus a segment sidecar")
    _common(scores, response_len=4)
    scores.add_argument("--layer", type=_count, required=True)
    scores.add_argument("--head", type=_count, default=0)
    scores.add_argument("--signed", action="store_true", help="signed Mamba coefficients instead of magnitudes")
    scores.add_argument("--out", required=True, metavar="DIR")
    cats = asub.add_parser("categories", help="category-level attention for every token-mixing layer")
    _common(cats, response_len=4)
    cats.add_argument("--out")
    sweep = asub.add_parser("sweep", help="pure token dropping at one layer and rate per row")
    _common(sweep)
    sweep.add_argument("--layers", type=_int_list, default=None, help="comma-separated (default: all)")
    sweep.add_argument("--rates", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    sweep.add_argument("--mode", choices=["uni", "attn"], default="uni")
    sweep.add_argument("--out")
    for p in (block, scores, cats, sweep):
        p.set_defaults(func=cmd_analyze)

    bn = sub.add_parser("bench", help="cost model and wall-clock measurement")
    bsub = bn.add_subparsers(dest="bench", required=True)
    analytic = bsub.add_parser("analytic", help="closed-form per-layer MACs and memory")
    _common(analytic)
    analytic.add_argument("--out")
    measure = bsub.add_parser("measure", help="median prefill time over a frame grid")
    _common(measure)
    measure.add_argument("--grid", type=_int_list, default=[64, 128, 256])
    measure.add_argument("--repeats", type=int, default=3)
    measure.add_argument("--decode-steps", type=_count, default=4)
    measure.add_argument("--out")
    measure.add_argument("--decode-out", help="per-step decode timings")
    for p in (analytic, measure):
        p.set_defaults(func=cmd_bench)
    return parser


@contextlib.contextmanager
def _sink(path):
    if path is None:
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


def _emit(rows, schema: str, path) -> None:
    cols = columns(schema)
    with _sink(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in cols})


def _setup(args):
    config = load_config(args.config)
    model = build_model(config)
    schedule = parse_schedule(args.schedule)
    if args.remap_from is not None:
        schedule = schedule.remap(args.remap_from, config.n_layers)
    schedule.check_layers(config.n_layers)
    return config, model, schedule


def _sequence(args, model):
    if args.input:
        frames = read_frames_jsonl(args.input)
        if args.tokens_per_frame:
            frames = project_frames(frames, args.tokens_per_frame)
        return assemble_sequence(frames, model.embedding, args.instruction_len, args.response_len, args.seed)
    return synthetic_sequence(model, args.frames, args.tokens_per_frame, args.seed, args.instruction_len,
                              args.response_len, args.raw_tokens_per_frame)


def cmd_run(args) -> int:
    _, model, schedule = _setup(args)
    seq = _sequence(args, model)
    strict = not args.lenient
    _, trace = model.forward(seq, schedule, strict=strict, last_only=True)
    out_dir = Path(args.capture) if args.capture else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    _emit(trace.rows(), "trace", out_dir / "trace.csv" if out_dir else None)
    if args.steps:
        tokens, stats = model.generate(seq, args.steps, schedule, strict=strict)
        rows = [{**row, "token": tok} for row, tok in zip(stats.rows(), tokens)]
        if out_dir is not None:
            _emit(rows, "generate", out_dir / "generate.csv")
        else:
            print("tokens: " + " ".join(str(t) for t in tokens), file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    config, model, schedule = _setup(args)
    seq = _sequence(args, model)
    strict = not args.lenient
    if args.analysis == "block":
        blocking = BlockingConfig(args.mode, args.from_layer, args.only_layer)
        blocking.check(config.kinds, strict)
        probe = "instruction" if args.mode == "v2i" else "response"
        if not len(seq.span(probe)):
            raise HybridSeqError(f"--mode {args.mode} needs a non-empty {probe} span")
        kw = dict(schedule=schedule, eps=args.eps, directions=args.directions, seed=args.seed)
        blocked = flow.perturbation_flow(seq, model, "vision", probe, blocking=blocking, **kw)
        unblocked = flow.perturbation_flow(seq, model, "vision", probe, **kw)
        row = {"mode": args.mode, "from_layer": args.from_layer, "target": "vision", "probe": probe,
               "blocked": blocked, "unblocked": unblocked}
        _emit([row], "block", args.out)
    elif args.analysis == "scores":
        if args.layer >= config.n_layers:
            raise HybridSeqError(f"layer {args.layer} out of range for a {config.n_layers}-layer stack")
        if config.kinds[args.layer] not in (ATTENTION, MAMBA):
            raise HybridSeqError(f"layer {args.layer} is an {config.kinds[args.layer]} layer and has no scores")
        _, trace = model.forward(seq, schedule, strict=strict, capture=True, last_only=True)
        values, sidecar = flow.export_heatmap(trace, args.layer, args.head, args.out, args.signed)
        print(values)
        print(sidecar)
    elif args.analysis == "categories":
        _, trace = model.forward(seq, schedule, strict=strict, capture=True, last_only=True)
        _emit(flow.category_rows(trace), "categories", args.out)
    else:
        layers = args.layers if args.layers is not None else list(range(config.n_layers))
        parse_schedule("-".join(f"{args.mode}_{layer}_0" for layer in sorted(set(layers)))).check_layers(
            config.n_layers)
        rows = flow.redundancy_sweep(seq, model, layers, args.rates, args.mode, strict=strict)
        _emit(rows, "sweep", args.out)
    return 0


def cmd_bench(args) -> int:
    config, model, schedule = _setup(args)
    if args.bench == "analytic":
        report = bench.analytic_cost(config, args.frames, args.tokens_per_frame, schedule, args.instruction_len,
                                     response_len=args.response_len)
        _emit(report.layers, "analytic", args.out)
        print(f"total_macs={report.total_macs} kv_peak_rows={report.kv_peak_rows} "
              f"kv_bytes={report.kv_bytes} ssm_state_bytes={report.ssm_state_bytes}", file=sys.stderr)
        return 0
    rows, decode_rows = bench.measured_scaling(
        model, args.grid, schedule, args.repeats, args.tokens_per_frame, args.decode_steps,
        args.instruction_len, args.seed,
    )
    _emit(rows, "measure", args.out)
    if args.decode_out:
        _emit(decode_rows, "decode", args.decode_out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "bench", None) == "measure" and args.repeats < 3:
        parser.error(f"--repeats must be >= 3, got {args.repeats}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except HybridSeqError as exc:
        print(f"hybridseq: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"hybridseq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
