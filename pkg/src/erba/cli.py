"""Command-line entry point: ``erba <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .objective import predict
from .pipeline.checkpoint import load_checkpoint, save_checkpoint
from .pipeline.config import SynthSpec, TrainConfig
from .pipeline.data import COLUMNS, parse_dataset
from .pipeline.gradcheck import THRESHOLD, run_gradcheck
from .pipeline.synth import gen_synth, write_synth
from .pipeline.train import evaluate, predict_all, train


def _gen_synth(args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    records, truths = gen_synth(spec, args.seed)
    path = write_synth(records, truths, args.out)
    print(f"wrote {len(records)} samples to {path}")
    return 0


def _train(args) -> int:
    config = TrainConfig.load(args.config)
    if args.workers is not None:
        config = config.replace(workers=args.workers)
    result = train(config, parse_dataset(args.data))
    save_checkpoint(result.model, args.out)
    last = result.log[-1]
    print(f"epochs={len(result.log)} task={last.task!r} total={last.total!r}")
    return 0


def _eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    print(evaluate(model, parse_dataset(args.data), args.workers).as_lines())
    return 0


def _predict(args) -> int:
    data_path = Path(args.data)
    model = load_checkpoint(args.ckpt)
    records = parse_dataset(data_path)
    preds = predict_all(model, records, args.workers)
    rows = {r.id: p for r, p in zip(records, preds)}
    out = ["\t".join(COLUMNS + ("mu", "log10_sigma", "yhat"))]
    lines = [ln for ln in data_path.read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.startswith("#")]
    for line in lines[1:]:
        mu, s = (float(v) for v in rows[line.split("\t", 1)[0].strip()])
        # predictive standard deviation of the log10 target
        yhat, sigma = predict(mu, s)
        out.append(f"{line.rstrip()}\t{mu!r}\t{sigma!r}\t{yhat!r}")
    Path(args.out).write_text("\n".join(out) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} predictions to {args.out}")
    return 0


def _gradcheck(args) -> int:
    config = TrainConfig.load(args.config)
    reports = run_gradcheck(config)
    for r in reports:
        print(r.line())
    worst = max(r.max_rel_error for r in reports)
    print(f"worst={worst:.3e} threshold={THRESHOLD:.0e} {'PASS' if worst < THRESHOLD else 'FAIL'}")
    return 0 if worst < THRESHOLD else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erba", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset with planted structure")
    p.add_argument("--spec", help="key=value generator spec (defaults if omitted)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_synth)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, help="override the config's worker count")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="print z-space metrics as key=value lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_eval)

    p = sub.add_parser("predict", help="append mu, log10_sigma and yhat columns")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_predict)

    p = sub.add_parser("gradcheck", help="finite-difference audit on a micro batch")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
