"""Command-line entry point: ``fedpeft <subcommand> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 data
error, 4 divergence, 5 report-table1 mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .federation import TrainingAborted

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5

SEED_ENV = "FEDPEFT_SEED"
THREADS_ENV = "FEDPEFT_THREADS"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpeft", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML experiment config")
        sp.add_argument("--seed", type=int, help=f"override config seed (env {SEED_ENV})")
        sp.add_argument("--out", help="output directory (overrides config output_dir)")
        sp.add_argument("--threads", type=int, help=f"client worker threads (env {THREADS_ENV})")

    sp = sub.add_parser("pretrain", help="centralised pretraining on the source task")
    common(sp)
    sp = sub.add_parser("federate", help="federated fine-tuning from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seeds", help="comma-separated seeds; one run per seed under <out>/seed_<s>")
    sp.add_argument("--mode", help="override the tuning mode kind")
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("eval", "train"), default="eval")
    sp = sub.add_parser("report-table1", help="analytical parameter/communication table")
    sp.add_argument("--clients", type=int, default=8)
    sp = sub.add_parser("partition-stats", help="per-client shard sizes and label entropy")
    common(sp)
    return p


def _resolve(args) -> tuple[ex.ExperimentConfig, int]:
    cfg = ex.load_config(args.config)
    seed = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, 1))
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg, threads


def _run(args) -> int:
    if args.command == "report-table1":
        rows = ex.report_table1(clients=args.clients)
        for row in rows:
            print(row.render())
        if args.clients != 8:
            return EXIT_OK
        bad = [r for r in rows if not r.ok]
        return EXIT_MISMATCH if bad else EXIT_OK

    cfg, threads = _resolve(args)
    out = Path(cfg.output_dir)
    if args.command == "pretrain":
        out.mkdir(parents=True, exist_ok=True)
        _, history = ex.pretrain(cfg, out / "pretrained.ckpt")
        loss, acc = history[-1] if history else (float("nan"), float("nan"))
        print(json.dumps({"checkpoint": str(out / "pretrained.ckpt"), "final_loss": loss,
                          "train_accuracy": acc}))
    elif args.command == "federate":
        if args.mode:
            cfg = cfg.with_mode(args.mode)
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
        for s in seeds:
            run_cfg = replace(cfg, seed=s)
            run_out = out / f"seed_{s}" if args.seeds else out
            history = ex.federate(run_cfg, args.checkpoint, run_out, threads=threads)
            last = history[-1]
            print(json.dumps({"out": str(run_out), "seed": s, "rounds": len(history),
                              "final_accuracy": last.server_accuracy,
                              "param_count": last.param_count}))
    elif args.command == "eval":
        train, ev = ex.load_datasets(cfg)
        acc, loss = ex.evaluate_checkpoint(args.checkpoint, ev if args.split == "eval" else train,
                                           cfg.model)
        print(json.dumps({"accuracy": acc, "loss": loss}))
    elif args.command == "partition-stats":
        print(json.dumps(ex.partition_stats(cfg), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, DivergenceError):
            return EXIT_DIVERGED
        if isinstance(cause, DataError):
            return EXIT_DATA
        return EXIT_FAILURE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
