"""Command-line front end: verify | bench | pretrain | encode | lift.

Exit codes: 0 success, 1 verification failure, 2 usage or parse error.
Every command is deterministic under a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import bench as bench_mod
from .checkpoint import (
    CheckpointError,
    lift_bert,
    load_checkpoint,
    parameters_from_checkpoint,
    save_checkpoint,
)
from .config import ModelConfig, toy_config
from .encoder import encode, init_parameters
from .pretraining import Trainer, corpus_to_inputs, load_toy_corpus
from .structure import (
    BuildOptions,
    build_flat_input,
    build_hierarchical_input,
    document_from_text,
    parse_structured_document,
    split_documents,
    truncate_structured,
)
from .verification import SweepSizes, run_checks

METRICS_HEADER = "step,mlm_loss,cpc_loss,total,wall_ms"


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return toy_config()
    try:
        return ModelConfig.from_json(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as err:
        _parse_fail(f"config parse error at line {err.lineno}: {err.msg}")
    except (OSError, ValueError) as err:
        _parse_fail(f"bad config {path}: {err}")


def _parse_fail(message: str) -> None:
    print(message, file=sys.stderr)
    sys.exit(2)


def _build_options(args) -> BuildOptions:
    return BuildOptions(
        hard_g2l=getattr(args, "hard_g2l", False),
        flat_structure=getattr(args, "flat_structure", False),
    )


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    sizes = args.sizes or [8, 64, 8]
    if len(sizes) != 3:
        _parse_fail("--sizes expects three integers: max_global,max_long,max_radius")
    sweep = SweepSizes(sizes[0], sizes[1], sizes[2], args.sweep_cases)
    results = run_checks(seed=args.seed, inject_fault=args.inject_fault, sweep=sweep)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {result.name} — {result.detail}")
    failures = [r for r in results if not r.passed]
    if failures:
        print(f"FAILURES: {len(failures)} of {len(results)}")
    else:
        print(f"ALL PASS ({len(results)} checks)")
    report = {
        "seed": args.seed,
        "sizes": sizes,
        "all_pass": not failures,
        "checks": [
            {"name": r.name, "passed": r.passed, "detail": r.detail} for r in results
        ],
    }
    if args.out:
        Path(args.out).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    if args.lengths != sorted(args.lengths):
        _parse_fail("--lengths must be ascending")
    rows = bench_mod.run_bench(
        args.lengths,
        r=args.radius,
        repeats=args.repeats,
        seed=args.seed,
        global_tokens=None if args.global_fraction else args.global_tokens,
        global_fraction=args.global_fraction,
        d_x=args.hidden,
        heads=args.heads,
    )
    csv = bench_mod.rows_to_csv(rows)
    print(csv, end="")
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    if args.plot:
        Path(args.plot).write_text(bench_mod.plot_svg(rows), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def metrics_to_csv(metrics) -> str:
    lines = [METRICS_HEADER]
    lines.extend(
        f"{m.step},{m.mlm_loss:.6f},{m.cpc_loss:.6f},{m.total:.6f},{m.wall_ms:.3f}"
        for m in metrics
    )
    return "\n".join(lines) + "\n"


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    if args.corpus:
        try:
            text = Path(args.corpus).read_text("utf-8")
        except OSError as err:
            _parse_fail(f"cannot read corpus: {err}")
    else:
        text = load_toy_corpus()
    try:
        inputs = corpus_to_inputs(text, config, min_sentences=args.min_sentences)
    except ValueError as err:
        _parse_fail(str(err))

    params = init_parameters(config, seed=args.seed)
    trainer = Trainer(
        params,
        inputs,
        seed=args.seed,
        batch_size=args.batch_size,
        learning_rate=args.lr,
    )
    metrics = trainer.run(args.steps)

    out = Path(args.out)
    save_checkpoint(params, out)
    out.with_name(out.name + ".config.json").write_text(
        config.to_json() + "\n", encoding="utf-8"
    )
    out.with_name(out.name + ".metrics.csv").write_text(
        metrics_to_csv(metrics), encoding="utf-8"
    )
    if metrics:
        last = metrics[-1]
        print(
            f"step {last.step}: mlm {last.mlm_loss:.4f}, cpc {last.cpc_loss:.4f}, "
            f"total {last.total:.4f}"
        )
    print(f"checkpoint written to {out}.manifest.json / {out}.blob")
    return 0


# ---------------------------------------------------------------------------
# encode


def _mask_lists(inp) -> dict:
    return {
        name: getattr(inp.masks, name).to(torch.int8).tolist()
        for name in ("g2g", "g2l", "l2g", "l2l")
    }


def _label_lists(inp) -> dict:
    return {
        name: getattr(inp.labels, name).tolist()
        for name in ("g2g", "g2l", "l2g", "l2l")
    }


def cmd_encode(args) -> int:
    config = _load_config(args.config)
    try:
        ckpt = load_checkpoint(args.checkpoint)
        params = parameters_from_checkpoint(ckpt, config)
    except CheckpointError as err:
        _parse_fail(str(err))
    if args.precision == "double":
        params = params.to_dtype(torch.float64)
    options = _build_options(args)

    path = Path(args.input)
    try:
        raw = path.read_text("utf-8")
    except OSError as err:
        _parse_fail(f"cannot read input: {err}")

    inputs = []
    if path.suffix == ".json":
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as err:
            _parse_fail(f"parse error at line {err.lineno}: {err.msg}")
        try:
            for obj in payload["documents"]:
                doc = truncate_structured(parse_structured_document(obj, config), config)
                inputs.append(build_hierarchical_input(doc, options, config))
        except (KeyError, TypeError, ValueError) as err:
            _parse_fail(f"bad structured input: {err}")
    else:
        for block in split_documents(raw):
            sentences = document_from_text(block, config)
            inputs.append(build_flat_input(sentences, config, options))
    if not inputs:
        _parse_fail("input contains no documents")

    documents = []
    with torch.no_grad():
        for inp in inputs:
            h_g, h_l = encode(inp, params)
            documents.append(
                {
                    "n_global": inp.n_global,
                    "n_long": inp.n_long,
                    "global_roles": inp.global_roles,
                    "global_embeddings": h_g.tolist(),
                    "long_embeddings": h_l.tolist(),
                    "masks": _mask_lists(inp),
                    "labels": _label_lists(inp),
                }
            )
    payload = json.dumps({"documents": documents}, indent=1)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


# ---------------------------------------------------------------------------
# lift


def cmd_lift(args) -> int:
    config = _load_config(args.config)
    try:
        src = load_checkpoint(args.src)
        params = lift_bert(src, config, sharing=args.sharing, seed=args.seed)
        save_checkpoint(params, args.out)
    except CheckpointError as err:
        print(f"lift failed: {err}", file=sys.stderr)
        return 1
    print(f"lifted checkpoint written to {args.out}.manifest.json / {args.out}.blob")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glenc",
        description="Global-local sparse attention encoder toolkit",
    )
    parser.add_argument("--threads", type=int, default=1, help="torch CPU threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=_int_list, default=None,
                   help="sweep bounds: max_global,max_long,max_radius")
    p.add_argument("--sweep-cases", type=int, default=40)
    p.add_argument("--out", default=None, help="write a JSON report here")
    p.add_argument("--inject-fault", default=None, help="test hook: force one check to fail")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="wall-time scaling benchmark")
    p.add_argument("--lengths", type=_int_list, default=[512, 1024, 2048])
    p.add_argument("--radius", type=int, default=64)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--global-tokens", type=int, default=16)
    p.add_argument("--global-fraction", type=int, default=None,
                   help="set n_g to n_l divided by this instead of --global-tokens")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--out", default=None, help="CSV path")
    p.add_argument("--plot", default=None, help="SVG path")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("pretrain", help="desk-scale MLM+CPC pre-training")
    p.add_argument("--corpus", default=None, help="text corpus (default: bundled toy corpus)")
    p.add_argument("--config", default=None, help="model config JSON")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-3,
                   help="Adam learning rate (default tuned for the toy corpus)")
    p.add_argument("--min-sentences", type=int, default=7,
                   help="drop documents with fewer sentences")
    p.add_argument("--out", required=True, help="checkpoint path prefix")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("encode", help="encode text or structured JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--precision", choices=["single", "double"], default="single")
    p.add_argument("--hard-g2l", type=_onoff, default=False, metavar="{on,off}")
    p.add_argument("--flat-structure", type=_onoff, default=False, metavar="{on,off}")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("lift", help="initialize from a BERT-format checkpoint")
    p.add_argument("--src", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--sharing", choices=["shared", "separate"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_lift)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
