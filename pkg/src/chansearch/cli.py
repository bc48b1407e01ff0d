"""Command-line entry point: ``chansearch {search,train,eval,export,selftest}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 stopped on the epoch or wall-clock budget (state persisted for ``--resume``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PRESETS, ConfigError, load_config
from .reporting import emit_events, emit_metrics, emit_plotdata, emit_spec
from .search import (BudgetExceeded, NonFiniteLoss, evaluate, load_concrete, read_checkpoint, restore_supernet,
                     run_search, save_concrete, train_final)
from .supernet import ArchitectureSpec, finalize

log = logging.getLogger("chansearch")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run file")
    common.add_argument("--seed", type=int, help="override search.seed")
    common.add_argument("--lambda", dest="lam", type=float, metavar="X", help="override the cost weight")
    common.add_argument("--preset", choices=PRESETS, help="stage ranges and selector kind")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")

    p = _Parser(prog="chansearch", description="Differentiable channel-width search.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("search", parents=[common], help="run the width search")
    s.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint.bin")

    t = sub.add_parser("train", parents=[common], help="train an exported spec from scratch")
    t.add_argument("--spec", required=True, metavar="PATH", help="arch.json from search or export")

    e = sub.add_parser("eval", parents=[common], help="test accuracy of a trained concrete net")
    e.add_argument("--model", required=True, metavar="PATH", help="model.npz written by train")

    x = sub.add_parser("export", parents=[common], help="re-emit arch.json from a search checkpoint")
    x.add_argument("--checkpoint", required=True, metavar="PATH")

    sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    return p


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args):
    return load_config(args.config, preset=args.preset, seed=args.seed, lam=args.lam, out_dir=args.out)


def cmd_search(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    cfg.echo(out)
    train, _ = cfg.data.load()
    log.info("search on %d samples, %d stages, lambda=%g", len(train), len(cfg.net.stages), cfg.search.lam)
    try:
        res = run_search(cfg.search, cfg.net, train, out_dir=out, resume=args.resume,
                         augment=cfg.data.augmentation())
    except BudgetExceeded as e:
        if e.reports:
            emit_metrics(e.reports, out)
            emit_plotdata(e.reports, out)
        emit_events(e.events, out)
        print(f"stopped: {e}; resume with --resume {out / 'checkpoint.bin'}", file=sys.stderr)
        return EXIT_BUDGET
    except NonFiniteLoss as e:
        (out / "diagnostic.json").write_text(json.dumps(e.state, indent=2, default=str))
        print(f"error: {e}; state dumped to {out / 'diagnostic.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    emit_metrics(res.reports, out)
    emit_plotdata(res.reports, out)
    emit_events(res.events, out)
    emit_spec(res.spec, out)
    print(json.dumps({"channels": res.spec.channels, "flops": res.spec.flops, "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    spec = ArchitectureSpec.from_json(Path(args.spec).read_text())
    train, test = cfg.data.load()
    res = train_final(spec, cfg.search, train, test, cfg.data.augmentation())
    save_concrete(out / "model.npz", res.net)
    summary = {"accuracy": res.accuracy, "train_accuracy": res.train_accuracy, "losses": res.losses,
               "flops": spec.flops, "param_count": res.net.param_count()}
    (out / "train.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({"accuracy": res.accuracy, "flops": spec.flops}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = load_concrete(args.model)
    _, test = cfg.data.load()
    print(json.dumps({"accuracy": evaluate(net, test), "samples": len(test)}))
    return EXIT_OK


def cmd_export(args) -> int:
    meta, arrays = read_checkpoint(args.checkpoint)
    net = restore_supernet(meta, arrays)
    sc = meta.get("search_config", {})
    spec = finalize(net, meta.get("provenance"), sc.get("latency_coefficient", 3.0e-12))
    if args.out:
        path = emit_spec(spec, args.out)
        print(path)
    else:
        sys.stdout.write(spec.to_json())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    return EXIT_OK if run_all() else EXIT_RUNTIME


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval,
            "export": cmd_export, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help / --version exit 0, errors exit 1
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        parser.print_usage(sys.stderr)
        print(f"chansearch: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, FloatingPointError) as e:
        print(f"chansearch: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
