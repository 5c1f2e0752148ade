"""Command-line entry point: ``isal-fragility {gen-pool,run-study,report}``.

Every subcommand takes ``--config`` (preset name or JSON file), ``--out``,
``--seed`` and ``--threads``.  Without ``--out`` outputs go under
``$ISAL_FRAGILITY_OUTPUT_ROOT`` (default ``./runs``) in a directory named
after the config.  Failures print one ``error[<category>]: ...`` line and
exit nonzero.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, StudyConfig, load_config

OUTPUT_ROOT_ENV = "ISAL_FRAGILITY_OUTPUT_ROOT"

EXIT_CODES = {"config": 2, "missing-input": 3, "io": 4, "compute": 5, "internal": 70}

log = logging.getLogger("isal_fragility")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _out_dir(args, cfg: StudyConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    return Path(root) / cfg.name


def _load(args) -> StudyConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=int(args.seed))
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg


def cmd_gen_pool(args) -> int:
    from .study import pool_for_config, write_pool

    cfg = _load(args)
    if cfg.case != "oscillator":
        raise ConfigError("gen-pool applies to the oscillator case only (the synthetic case has no signals)")
    out = _out_dir(args, cfg) / "pool"
    t0 = time.perf_counter()
    pool = pool_for_config(cfg, cfg.seed, args.threads)
    write_pool(pool, out, args.write_signals, f"config_sha256={cfg.digest()}")
    log.info("pool of %d signals written to %s in %.1f s", len(pool), out, time.perf_counter() - t0)
    print(out)
    return 0


def cmd_run_study(args) -> int:
    from .study import read_pool, run_study, write_study

    cfg = _load(args)
    root = _out_dir(args, cfg)
    pool = None
    if cfg.case == "oscillator":
        pool_dir = Path(args.pool) if args.pool else root / "pool"
        pool = read_pool(pool_dir)
        if pool.seed != cfg.seed:
            log.warning("pool seed %d differs from study seed %d", pool.seed, cfg.seed)
    t0 = time.perf_counter()
    res = run_study(cfg, args.threads, pool)
    out = write_study(res, root / "study")
    log.info("study written to %s in %.1f s", out, time.perf_counter() - t0)
    print(out)
    return 0


def cmd_report(args) -> int:
    from .study import make_report

    cfg = _load(args)
    root = _out_dir(args, cfg)
    study = Path(args.study) if args.study else root / "study"
    out = make_report(study, root / "report")
    print((out / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isal-fragility", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="preset name or JSON config file")
        sp.add_argument("--out", help="output directory (default: $%s/<config name>)" % OUTPUT_ROOT_ENV)
        sp.add_argument("--seed", type=int, help="override the config's base seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")

    g = sub.add_parser("gen-pool", help="generate the synthetic signal pool and its IM table")
    common(g)
    g.add_argument("--write-signals", action="store_true", help="also write one .npz file per accelerogram")
    g.set_defaults(func=cmd_gen_pool)

    r = sub.add_parser("run-study", help="run all replications and write the study tables")
    common(r)
    r.add_argument("--pool", help="pool directory (default: <out>/pool)")
    r.set_defaults(func=cmd_run_study)

    rep = sub.add_parser("report", help="summarise a study and write figure data")
    common(rep)
    rep.add_argument("--study", help="study directory (default: <out>/study)")
    rep.set_defaults(func=cmd_report)
    return p


def _categorize(exc: BaseException) -> str:
    from .study import MissingInput, StudyAborted

    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, MissingInput):
        return "missing-input"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (StudyAborted, ArithmeticError, RuntimeError, ValueError)):
        return "compute"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        cat = _categorize(exc)
        print(f"error[{cat}]: {exc}", file=sys.stderr)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
