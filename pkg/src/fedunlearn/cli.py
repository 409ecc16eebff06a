"""Command-line entry point.

    fedunlearn train   --config exp.yaml
    fedunlearn unlearn --config exp.yaml --third-party noise --lambda 0.7
    fedunlearn retrain --config exp.yaml
    fedunlearn mia     --config exp.yaml
    fedunlearn report  --config exp.yaml        (or --out RUN_DIR)
    fedunlearn run     --config exp.yaml        (all of the above)
    fedunlearn make-digits --out data/digits    (IDX digit corpus)

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import ExperimentConfig
from .errors import ConfigError, DataFormatError

logger = logging.getLogger("fedunlearn")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser, need_config: bool = True) -> None:
    p.add_argument("--config", required=need_config, help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("--lambda", dest="lam", type=float, help="override the KL/retain blend weight")
    p.add_argument("--third-party", choices=["noise", "reserved"], action="append",
                   help="third-party data kind (repeatable; default: from config)")
    p.add_argument("--forget-fraction", type=float, help="override the forget fraction")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedunlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("train", "federated training of the target model"),
        ("unlearn", "unlearn the forget set from the target model"),
        ("retrain", "retrain-from-scratch baseline without the forget set"),
        ("mia", "membership-inference audit of the run's models"),
        ("run", "train, retrain, unlearn, mia and report in one go"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "unlearn":
            p.add_argument("--model", help="target model file (default: <out>/target.funl)")
        if name == "mia":
            p.add_argument("--model", action="append", default=[], metavar="LABEL=PATH",
                           help="model to audit; repeatable (default: every model in the run dir)")
    p = sub.add_parser("report", help="merge stage fragments into report.json and a CSV")
    _common(p, need_config=False)
    p = sub.add_parser("make-digits", help="write an MNIST-format IDX corpus from bundled digits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.lam is not None:
        if not 0.0 <= args.lam <= 1.0:
            raise ConfigError(f"--lambda must lie in [0, 1], got {args.lam}")
        cfg.unlearn.lam = args.lam
    if args.third_party:
        cfg.unlearn.third_party = list(dict.fromkeys(args.third_party))
    if args.forget_fraction is not None:
        if not 0.0 < args.forget_fraction < 1.0:
            raise ConfigError(f"--forget-fraction must lie in (0, 1), got {args.forget_fraction}")
        cfg.unlearn.forget_fraction = args.forget_fraction
    cfg.validate()
    return cfg


def _parse_models(items: List[str]):
    out = {}
    for item in items:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"--model expects LABEL=PATH, got {item!r}")
        out[label] = path
    return out or None


def dispatch(args) -> object:
    from . import harness

    if args.command == "make-digits":
        from .digits_idx import write_digits_idx

        return {k: str(v) for k, v in write_digits_idx(args.out, args.n_train, args.n_test, args.seed).items()}
    if args.command == "report":
        if args.config:
            out = load_config(args).out
        elif args.out:
            out = args.out
        else:
            raise ConfigError("report needs --config or --out")
        return harness.cmd_report(out)
    cfg = load_config(args)
    if args.command == "train":
        state = harness.cmd_train(cfg)
        return {"train_seconds": state.wall_clock["train"], "out": cfg.out}
    if args.command == "unlearn":
        return {k: harness.cmd_unlearn(cfg, k, model_path=args.model)["timing"] for k in cfg.unlearn.third_party}
    if args.command == "retrain":
        return harness.cmd_retrain(cfg)["timing"]
    if args.command == "mia":
        models = _parse_models(args.model)
        return {k: harness.cmd_mia(cfg, k, model_paths=models)["verdicts"] for k in cfg.unlearn.third_party}
    return harness.run_all(cfg)["timing"]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
