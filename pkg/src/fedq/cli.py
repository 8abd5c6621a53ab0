"""Command line entry point: ``fedq {gen-env,solve,run,sweep,verify}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import environments as envs
from . import harness
from .federation import OracleError, check_partition, load_partition, save_partition
from .mdp_core import ConvergenceError, load_mdp, save_mdp, value_iteration

log = logging.getLogger("fedq")


def _setup_logging() -> None:
    level = os.environ.get("FEDQ_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def cmd_gen_env(args) -> int:
    doc = harness.load_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = envs.spec_from_dict(doc)
    mdp, partition = envs.generate(spec)
    out = Path(args.out)
    # build both documents before touching the disk
    with tempfile.TemporaryDirectory() as tmp:
        save_mdp(mdp, Path(tmp) / "mdp.json")
        save_partition(partition, Path(tmp) / "partition.json")
        texts = {name: (Path(tmp) / name).read_text(encoding="utf-8") for name in ("mdp.json", "partition.json")}
    for name, text in texts.items():
        _atomic_write(out / name, text)
    report = envs.describe_partition(partition, mdp)
    print(envs.format_report(report))
    return 0


def cmd_solve(args) -> int:
    mdp = load_mdp(args.mdp)
    tol = args.tol if args.tol is not None else 1e-10
    q, iters = value_iteration(mdp, tol=tol)
    path = Path(args.out)
    harness.save_qstar(path, q, tol, iters)
    _, meta = harness.load_qstar(path, mdp)
    print(f"iters={iters} residual={meta['residual']:.3e} tol={tol:g} -> {path}")
    return 0


def _run_config(args):
    path = Path(args.config)
    doc = harness.load_json(path)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    return doc, path.parent


def cmd_run(args) -> int:
    doc, base = _run_config(args)
    cfg = harness.config_from_dict(doc, base)
    out = args.out or cfg.output
    if out is None:
        raise harness.ConfigError("output", "give --out or an 'output' field")
    res = harness.write_run_csv(cfg, out, timing=args.timing)
    last = res.rows[-1]
    print(f"{cfg.run_id}: {len(res.rows)} rows, final linf_error={last['linf_error']:.6g} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    path = Path(args.config)
    doc = harness.load_json(path)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    rows = harness.run_sweep(doc, path.parent, jobs=args.jobs, timing=args.timing)
    out = args.out or doc.get("output")
    if out is None:
        raise harness.ConfigError("output", "give --out or an 'output' field")
    _atomic_write(Path(out), harness.sweep_csv(rows))
    failed = sorted({r["cell"] for r in rows if r["status"] != "ok"})
    print(f"{len(rows)} rows, {len(failed)} failed cells -> {out}")
    for cell in failed:
        print(f"  failed: {cell}")
    return 0


def cmd_verify(args) -> int:
    mdp = load_mdp(args.mdp)
    partition = load_partition(args.partition)
    check_partition(mdp, partition)
    results = harness.verify_instance(mdp, partition, n_pairs=args.pairs, seed=args.seed or 0)
    ok = True
    for i, res in enumerate(results):
        print(res.line())
        if not res.passed:
            ok = False
            if res.witness is not None and args.out:
                wpath = Path(args.out) / f"witness_{i}.json"
                _atomic_write(wpath, json.dumps({"check": res.name, **res.witness}) + "\n")
                print(f"  witness written to {wpath}")
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedq", description="Federated tabular Q-learning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate an MDP and partition from an environment spec")
    p.add_argument("--config", required=True, help="environment spec (JSON)")
    p.add_argument("--out", required=True, help="output directory for mdp.json and partition.json")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("solve", help="compute Q* by value iteration")
    p.add_argument("mdp", help="MDP file")
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_solve)

    for name, func, helptext in (
        ("run", cmd_run, "run one experiment and write its metrics CSV"),
        ("sweep", cmd_sweep, "run a parameter grid and write a combined CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--timing", action="store_true", help="fill the wall_ms column")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="check operator invariants on an instance")
    p.add_argument("mdp")
    p.add_argument("partition")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for witness files of failed checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, ConvergenceError, OracleError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
