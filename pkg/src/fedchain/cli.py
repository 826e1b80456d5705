"""Command line: ``fedchain run|replay-chain|paper-tables|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .chain import replay_chain
from .harness import load_and_override, paper_tables, write_artifacts
from .scenario import run_scenario
from .tensor_nn import gradcheck

GRADCHECK_TOL = 1e-5


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedchain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one scenario")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", default="out")
    run.add_argument("--threads", type=int)
    run.add_argument("--strict-chain", action="store_true",
                     help="aggregate only chain-confirmed updates")
    run.add_argument("--full-payloads", action="store_true",
                     help="keep model payloads in chain dumps")

    rp = sub.add_parser("replay-chain", help="re-validate a JSON-lines chain dump")
    rp.add_argument("dump")

    pt = sub.add_parser("paper-tables", help="run the Vanilla and decentralized table scenarios")
    pt.add_argument("config_dir")
    pt.add_argument("--out-dir", default="tables")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--threads", type=int)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    gc.add_argument("--seed", type=int, default=0)
    return p


def cli_main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"fedchain {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _run(args) -> int:
    cfg = load_and_override(args.config, args.seed, args.threads, args.strict_chain)
    result = run_scenario(cfg)
    for path in write_artifacts(result, args.out_dir, args.full_payloads):
        print(path)
    unfinished = {k: c["unfinished"] for k, c in result.metrics.counters.items() if c.get("unfinished")}
    if unfinished:
        print(f"warning: peers {sorted(unfinished)} did not finish all rounds", file=sys.stderr)
    return 0


def _replay(args) -> int:
    path = Path(args.dump)
    with path.open(encoding="utf-8") as fh:
        checked, violation = replay_chain(fh)
    if violation is not None:
        print(f"{path}: {violation}")
        return 2
    print(f"{path}: {checked} blocks OK")
    return 0


def _paper_tables(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    for path in paper_tables(args.config_dir, args.out_dir, overrides):
        print(path)
    return 0


def _gradcheck(args) -> int:
    err = gradcheck(args.seed)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


_COMMANDS = {"run": _run, "replay-chain": _replay, "paper-tables": _paper_tables,
             "gradcheck": _gradcheck}


def main():
    sys.exit(cli_main())
