"""Command-line entry point: ``mosenhance <command> [flags]``.

Every command prints its resolved configuration first. Failures print one
line to stderr, ``error kind=<kind> field=<field> message=<text>``, and exit
with status 2 (status 1 for a failed self-check).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import PROFILES, load_run_config
from .errors import MosEnhanceError
from .metrics import format_report
from .selfcheck import run_all

COMMANDS = ("synth-data", "train-pmos", "train-se", "train-joint", "build-qsm", "enhance", "evaluate", "self-check")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--profile", choices=sorted(PROFILES))
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--mu", type=float, help="shallow-fusion weight (0 disables the QSM)")
    common.add_argument("--lambda1", type=float)
    common.add_argument("--lambda2", type=float)
    common.add_argument("--out", help="artifact directory")

    parser = argparse.ArgumentParser(prog="mosenhance", description="MOS-aware speech enhancement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("enhance", "evaluate"):
            p.add_argument("--split", choices=pipeline.SPLIT_CHOICES, default="test")
    return parser


def _error_line(kind: str, field, message: str) -> str:
    text = " ".join(str(message).split())
    return f"error kind={kind} field={field or '-'} message={text}"


def _log(line: str) -> None:
    print(line, flush=True)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("profile", "seed", "workers", "mu", "lambda1", "lambda2", "out")}
    try:
        cfg = load_run_config(args.config, overrides)
        print(f"# command {args.command}")
        print(cfg.describe())
        print("# end config", flush=True)
        return _dispatch(args, cfg)
    except MosEnhanceError as exc:
        print(_error_line(exc.kind, exc.field, exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(_error_line("io-error", getattr(exc, "filename", None), exc.strerror or exc), file=sys.stderr)
        return 2


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "synth-data":
        print(f"manifest {pipeline.synth_data(cfg)}")
    elif cmd in ("train-pmos", "train-se", "train-joint"):
        trainer = {"train-pmos": pipeline.train_pmos, "train-se": pipeline.train_se, "train-joint": pipeline.train_joint}
        result = trainer[cmd](cfg, log=_log)
        print(f"best_epoch {result.best_epoch} best_val {result.best_val!r}")
    elif cmd == "build-qsm":
        model = pipeline.build_qsm(cfg)
        print(f"qsm {cfg.path('model.qsm')} channels {model.n_channels} levels {model.levels}")
    elif cmd == "enhance":
        for p in pipeline.enhance_split(cfg, args.split):
            print(f"wrote {p}")
    elif cmd == "evaluate":
        sys.stdout.write(format_report(pipeline.evaluate(cfg, args.split)))
    elif cmd == "self-check":
        results = run_all(cfg.seed)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return 0 if all(ok for _, ok, _ in results) else 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
