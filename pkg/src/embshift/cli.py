"""Command-line entry point.

Every subcommand reads and writes the binary formats in :mod:`embshift.formats`
or JSON. Failures exit nonzero and print one JSON object on stderr::

    {"error": "<usage|format|dimension|provider|divergence>", "message": "..."}

Exit codes: 2 usage, 3 format, 4 dimension mismatch, 5 provider, 6 divergence.
Options can also come from ``--config FILE.json`` (keys are option names with
dashes replaced by underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import formats
from .direction import compute_direction, direction_stats
from .encoders import PROFILES, FileProvider, HttpProvider, emit_llm_instruction, ingest_pairs, read_prompt_list
from .errors import DimensionError, DivergenceError, EmbshiftError, UsageError
from .evalkit import evaluate, transfer_report
from .injector import inject_batch
from .training import TrainConfig, train

log = logging.getLogger("embshift")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _exists(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _load_dataset(args):
    ds = formats.read_dataset(_exists(args.dataset, "--dataset"))
    if getattr(args, "subsample", None):
        ds = formats.subsample(ds, args.subsample, args.seed)
    return ds


def _dims(label, d, l, *others):
    for other_label, od, ol in others:
        if (od, ol) != (d, l):
            raise DimensionError(f"{other_label} is {od}x{ol} but {label} is {d}x{l}")


# -- commands ----------------------------------------------------------------


def cmd_instruct(args):
    _require(args, "bias")
    text = emit_llm_instruction(args.bias, args.count)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_ingest(args):
    _require(args, "neutral", "biased", "out")
    neutral = read_prompt_list(_exists(args.neutral, "--neutral"))
    biased = read_prompt_list(_exists(args.biased, "--biased"))
    if args.provider == "file":
        _require(args, "manifest")
        provider = FileProvider(args.manifest)
    else:
        _require(args, "endpoint")
        d = l = encoder_id = None
        if args.profile:
            prof = PROFILES[args.profile]
            d, l, encoder_id = prof.d, prof.l, prof.encoder_id
        provider = HttpProvider(args.endpoint, d, l, encoder_id)
    ds = ingest_pairs(provider, neutral, biased, bias_label=args.bias_label)
    formats.write_dataset(args.out, ds)
    log.info("wrote %s: %d pairs of %dx%d", args.out, ds.n, ds.d, ds.l)


def cmd_direction(args):
    _require(args, "dataset", "out")
    ds = _load_dataset(args)
    direction = compute_direction(ds)
    stats = direction_stats(ds, direction)
    meta = {"source_digest": ds.digest(), "n": ds.n}
    if ds.meta.get("bias_label") is not None:
        meta["bias_label"] = ds.meta["bias_label"]
    formats.write_direction(args.out, formats.DirectionFile(direction, meta))
    _write_json(stats.to_dict(), args.stats)


def cmd_train(args):
    _require(args, "dataset", "direction", "out")
    ds = _load_dataset(args)
    df = formats.read_direction(_exists(args.direction, "--direction"))
    _dims("dataset", ds.d, ds.l, ("direction", df.d, df.l))
    config = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, mode=args.mode, r=args.r)
    report_path = args.report or f"{args.out}.report.json"

    def progress(epoch, value):
        print(f"epoch {epoch} loss {value:.6g}", file=sys.stderr)

    try:
        module, report = train(ds, df.direction, config, on_epoch=None if args.quiet else progress)
    except DivergenceError as exc:
        if exc.report is not None:
            _write_json(exc.report.to_dict(), report_path)
        raise
    meta = report.to_dict()
    meta.pop("wall_time")
    formats.write_checkpoint(args.out, formats.Checkpoint(module, meta))
    _write_json(report.to_dict(), report_path)


def cmd_inject(args):
    _require(args, "direction", "in_path", "out")
    df = formats.read_direction(_exists(args.direction, "--direction"))
    batch = formats.read_batch(_exists(args.in_path, "--in"))
    _, d, l = batch.data.shape
    if args.no_adapt:
        module = None
        _dims("direction", df.d, df.l, ("input batch", d, l))
    else:
        if args.gain != 1.0:
            raise UsageError("--gain only applies with --no-adapt")
        _require(args, "module")
        module = formats.read_checkpoint(_exists(args.module, "--module")).module
        _dims("direction", df.d, df.l, ("input batch", d, l), ("module", module.d, module.l))
    out = inject_batch(module, df.direction, batch.data, gain=args.gain)
    # meta passes through unchanged: the output describes the same prompts
    formats.write_batch(args.out, formats.EmbeddingBatch(out, batch.meta))


def cmd_eval(args):
    _require(args, "module", "direction", "dataset")
    module = formats.read_checkpoint(_exists(args.module, "--module")).module
    df = formats.read_direction(_exists(args.direction, "--direction"))
    ds = _load_dataset(args)
    _dims("module", module.d, module.l, ("direction", df.d, df.l), ("dataset", ds.d, ds.l))
    if args.target:
        target = formats.read_dataset(_exists(args.target, "--target"))
        _dims("module", module.d, module.l, ("target dataset", target.d, target.l))
        src, tgt = transfer_report(module, df.direction, ds, target)
        _write_json({"source": src.to_dict(), "target": tgt.to_dict()}, args.out)
    else:
        _write_json(evaluate(module, df.direction, ds).to_dict(), args.out)


def cmd_inspect(args):
    path = args.file or args.in_path
    if not path:
        raise UsageError("inspect needs a file")
    head = formats.read_header(_exists(path, "file"))
    _write_json(head.as_dict(), args.out)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embshift", description="Embedding-space bias direction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.commands = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        parser.commands[name] = p
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=func)
        return p

    p = add("instruct", cmd_instruct, "print the prompt-pair instruction for an LLM")
    p.add_argument("--bias", help="bias description, e.g. 'negative emotion'")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--out")

    p = add("ingest", cmd_ingest, "encode aligned prompt lists into a pair dataset")
    p.add_argument("--neutral", help="neutral prompts, one per line")
    p.add_argument("--biased", help="rewritten prompts, one per line")
    p.add_argument("--provider", choices=("file", "http"), default="file")
    p.add_argument("--manifest")
    p.add_argument("--endpoint")
    p.add_argument("--profile", choices=sorted(PROFILES), help="declare dims for the HTTP provider")
    p.add_argument("--bias-label")
    p.add_argument("--out")

    p = add("direction", cmd_direction, "compute the mean-difference direction")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--stats", help="write stats JSON here instead of stdout")
    p.add_argument("--subsample", type=int, metavar="K")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train the attention module")
    p.add_argument("--dataset")
    p.add_argument("--direction")
    p.add_argument("--out")
    p.add_argument("--report", help="TrainReport JSON (default: OUT.report.json)")
    p.add_argument("--mode", choices=("token", "embedding", "both"), default="both")
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample", type=int, metavar="K")
    p.add_argument("--quiet", action="store_true", help="no per-epoch loss lines")

    p = add("inject", cmd_inject, "add the (adapted) direction to a batch of embeddings")
    p.add_argument("--module")
    p.add_argument("--direction")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")
    p.add_argument("--no-adapt", action="store_true", help="add gain * direction without the module")
    p.add_argument("--gain", type=float, default=1.0)

    p = add("eval", cmd_eval, "embedding-space diagnostics (optionally a transfer report)")
    p.add_argument("--module")
    p.add_argument("--direction")
    p.add_argument("--dataset")
    p.add_argument("--target", help="out-of-domain dataset for a transfer report")
    p.add_argument("--out")
    p.add_argument("--subsample", type=int, metavar="K")
    p.add_argument("--seed", type=int, default=0)

    p = add("inspect", cmd_inspect, "print header and meta of any embshift file")
    p.add_argument("file", nargs="?")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        sub = parser.commands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(config) - known - {"in"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "in" in config:
            config["in_path"] = config.pop("in")
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except EmbshiftError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # non-finite data and similar value problems surface as format errors
        print(json.dumps({"error": "format", "message": str(exc)}), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
