"""Command-line entry point: ``rsdgc run`` and ``rsdgc compare``.

Exit codes: 0 success, 2 configuration error, 3 diverged training.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DivergedLoss
from .experiment import ExperimentConfig, coerce_overrides, compare, load_config, run

log = logging.getLogger("rsdgc")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsdgc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare"):
        p = sub.add_parser(name, help=f"{name} experiment(s); any config key can be overridden with --key value")
        p.add_argument("--config", action="append", default=[], metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int, metavar="INT")
        if name == "compare":
            p.add_argument("--compressors", metavar="A,B,...",
                           help="run the (first) config once per compressor")
    return parser


def _pairs(extra: list[str]) -> dict[str, str]:
    pairs: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(token, "expected --key value")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            value = extra[i + 1]
            i += 1
        pairs[key] = value
        i += 1
    return pairs


def _configs(args, extra) -> list[ExperimentConfig]:
    overrides = coerce_overrides(_pairs(extra))
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["output_path"] = args.out
    bases = [load_config(p) for p in args.config] or [ExperimentConfig()]
    configs = [b.replace(**overrides) for b in bases]
    if getattr(args, "compressors", None):
        configs = [configs[0].replace(compressor=c.strip()) for c in args.compressors.split(",") if c.strip()]
    if args.command == "run" and len(configs) != 1:
        raise ConfigError("config", "run takes exactly one --config")
    return configs


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args, extra = _parser().parse_known_args(argv)
    try:
        configs = _configs(args, extra)
        if args.command == "run":
            result = run(configs[0])
            s = result.summary
            log.info("test acc %.4f  train acc %.4f  bytes %d  ratio %.2fx -> %s",
                     s["final_test_acc"], s["final_train_acc"], s["cumulative_bytes"],
                     s["compression_ratio"], result.summary_json)
        else:
            table = compare(configs, configs[0].output_path)
            sys.stdout.write(table.to_csv())
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
