"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, missing files, invalid
values), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..editors import CORRECTION_MODES, GuidanceParams
from ..errors import RejectedInput
from .config import ExperimentConfig, load_config
from .datasets import FAMILIES, gen_dataset
from .runner import EXPERIMENT_COMMANDS, execute, merge_reports, train_checkpoint

log = logging.getLogger("cvclab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _csv_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--model", help="model description file (overrides --family)")
    g.add_argument("--family", choices=FAMILIES)
    g.add_argument("--d", type=int)
    g.add_argument("--sep", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--radius", type=float)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (a run manifest also works)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--backend", choices=("oracle", "learned"))
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("flowedit", "cvc"))
    p.add_argument("--steps", type=int)
    p.add_argument("--start-fraction", type=float)
    p.add_argument("--seed", type=int, action="append", dest="seed_list", help="repeatable")
    p.add_argument("--seeds", type=_csv_ints, help="comma-separated seeds")
    p.add_argument("--n-sources", type=int)
    p.add_argument("--c-src", type=int)
    p.add_argument("--c-tar", type=int)
    p.add_argument("--omega1", type=float)
    p.add_argument("--omega2", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--correction-mode", choices=CORRECTION_MODES)
    p.add_argument("--second-eta", action="store_true", default=None, help="apply eta again in the Euler update")
    p.add_argument("--timing", action="store_true", default=None, help="record wall-clock ms in metrics.csv")
    p.add_argument("--omega2-list", type=_csv_floats)
    _add_data_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvclab", description="Flow-matching editing lab: FlowEdit vs CVC on Gaussian mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a model description and samples")
    _add_data_flags(p)
    p.add_argument("--n", type=int, default=1000, help="samples per condition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the velocity network")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="directory, or a .json checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--p-drop", type=float)
    p.add_argument("--n-data", type=int)
    p.add_argument("--hidden", type=_csv_ints)
    p.add_argument("--seed", type=int)
    _add_data_flags(p)

    for name, text in [
        ("reconstruct", "edit with the target condition equal to the source"),
        ("edit", "edit from c-src to c-tar"),
        ("sweep", "FlowEdit reconstruction across omega2 values"),
        ("ablate", "flowedit / cvc-no-correction / cvc-full reconstruction"),
    ]:
        _add_experiment_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("report", help="merge metrics.csv files under a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="merged CSV path (default RUN_DIR/report.csv)")
    return parser


def _apply_data(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {k: getattr(args, k) for k in ("model", "family", "d", "sep", "sigma", "k", "radius") if getattr(args, k) is not None}
    if kw:
        if "family" in kw and "model" not in kw:
            kw["model"] = None
        cfg = replace(cfg, data=replace(cfg.data, **kw))
    return cfg


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = _apply_data(cfg, args)
    simple = {
        "backend": args.backend, "checkpoint": args.checkpoint, "method": args.method, "steps": args.steps,
        "start_fraction": args.start_fraction, "n_sources": args.n_sources, "c_src": args.c_src,
        "c_tar": args.c_tar, "timing": args.timing, "omega2_list": args.omega2_list,
    }
    cfg = replace(cfg, **{k: v for k, v in simple.items() if v is not None})
    seeds = tuple(args.seed_list or ()) + tuple(args.seeds or ())
    if seeds:
        cfg = replace(cfg, seeds=seeds)
    if args.omega1 is not None or args.omega2 is not None:
        g = cfg.guidance
        w1 = args.omega1 if args.omega1 is not None else (g.omega1 if g else 1.0)
        w2 = args.omega2 if args.omega2 is not None else (g.omega2 if g else 1.0)
        cfg = replace(cfg, guidance=GuidanceParams(w1, w2))
    cvc = {"alpha": args.alpha, "beta": args.beta, "eta": args.eta,
           "correction_mode": args.correction_mode, "second_eta_in_update": args.second_eta}
    cvc = {k: v for k, v in cvc.items() if v is not None}
    if cvc:
        cfg = replace(cfg, cvc=replace(cfg.cvc, **cvc))
    return cfg


def _train_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = _apply_data(cfg, args)
    kw = {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size, "p_drop": args.p_drop,
          "n_data": args.n_data, "hidden": args.hidden, "seed": args.seed}
    kw = {k: v for k, v in kw.items() if v is not None}
    if kw:
        cfg = replace(cfg, train=replace(cfg.train, **kw))
    return cfg


def run(args) -> None:
    if args.command == "gen-data":
        params = {k: getattr(args, k) for k in ("d", "sep", "sigma", "k", "radius") if getattr(args, k) is not None}
        for path in gen_dataset(args.family or "symmetric-2gmm", params, args.seed, args.out, args.n):
            print(path)
    elif args.command == "train":
        print(train_checkpoint(_train_config(args), args.out))
    elif args.command in EXPERIMENT_COMMANDS:
        cfg = config_from_args(args)
        out = args.out or str(Path("runs") / args.command)
        print(execute(args.command, cfg, out))
    elif args.command == "report":
        if not Path(args.run_dir).is_dir():
            raise RejectedInput(f"run directory not found: {args.run_dir}")
        try:
            print(merge_reports(args.run_dir, args.out))
        except FileNotFoundError as exc:
            raise RejectedInput(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except RejectedInput as exc:
        print(f"cvclab: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"cvclab: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
