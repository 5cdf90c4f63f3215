"""Command-line entry point: ``tgsage <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 input or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .fileformats import FormatError, load_activations, load_rdm, save_rdm
from .rsa import RsaError, candidate_rdms, rdm_similarity
from .space import SpaceError, cardinality, enumerate_space, write_genomes, read_genomes

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def _config(args):
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.replace("seeds", search=args.seed)
    if getattr(args, "workers", None) is not None:
        config = config.replace("run", workers=args.workers)
    return config


def cmd_search(args) -> int:
    from .orchestrator import load_run_config, run_search

    if args.config is None:
        config = load_run_config(args.run_dir)
    else:
        config = _config(args)
    run_dir = run_search(config, args.run_dir, max_new_evaluations=args.max_new_evaluations)
    report = run_dir / "report.json"
    if report.exists():
        print(report.read_text(encoding="utf-8"), end="")
    else:
        print(f"search paused; resume with: tgsage search --run-dir {run_dir}")
    return EXIT_OK


def cmd_worker(args) -> int:
    from .orchestrator import worker_loop

    n = worker_loop(args.run_dir, args.worker_id, stale_timeout=args.stale_timeout, max_samples=args.max_samples)
    print(f"worker {args.worker_id} processed {n} samples")
    return EXIT_OK


def cmd_predictivity(args) -> int:
    from .orchestrator import run_predictivity

    config = _config(args)
    pool = read_genomes(args.pool) if args.pool else args.n
    report = run_predictivity(
        config,
        pool,
        budgets=args.budgets,
        alphas=args.alphas,
        kind="pearson" if args.pearson else "spearman",
        work_dir=args.run_dir,
    )
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.run_dir:
        out = Path(args.run_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictivity.json").write_text(text, encoding="utf-8")
    for b, row in report.table.items():
        cells = "  ".join(f"{k}={'nan' if v is None else f'{v:.3f}'}" for k, v in row.items())
        print(f"budget {b}: {cells}")
    if report.zero_variance:
        print("zero-variance predictors: " + ", ".join(report.zero_variance))
    return EXIT_OK


def cmd_rdm(args) -> int:
    act = load_activations(args.activations)
    mode = "per-category" if args.per_category else "per-input"
    size = None if args.subsample == 0 else args.subsample
    rdm = candidate_rdms({"x": act}, mode, size, args.seed)["x"]
    save_rdm(args.out, rdm)
    print(f"wrote {rdm.size}x{rdm.size} RDM to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    r = rdm_similarity(load_rdm(args.a), load_rdm(args.b))
    print(f"{r:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report

    for path in write_report(args.run_dir):
        print(path)
    return EXIT_OK


def cmd_cost(args) -> int:
    from .evaluator.cost import search_cost

    print(search_cost(args.m1, args.e1, args.m2, args.e2))
    return EXIT_OK


def cmd_enumerate(args) -> int:
    if args.config:
        space = load_config(args.config).space.build()
    else:
        from .config import SpaceSection

        space = SpaceSection(kind=args.space).build()
    if args.count:
        print(cardinality(space))
        return EXIT_OK
    genomes = enumerate_space(space, cap=args.cap)
    if args.out:
        n = write_genomes(args.out, genomes)
    else:
        n = sum(1 for _ in genomes)
    print(n)
    return EXIT_OK


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgsage", description="Teacher-guided architecture search at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run or resume a search")
    s.add_argument("--config", help="TOML config (omit to resume from the run directory)")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--seed", type=int, help="override seeds.search")
    s.add_argument("--workers", type=int, help="override run.workers")
    s.add_argument("--max-new-evaluations", type=int, help="pause after this many in-process evaluations")
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("worker", help="claim and evaluate samples of a run")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--worker-id", required=True)
    s.add_argument("--stale-timeout", type=float)
    s.add_argument("--max-samples", type=int)
    s.set_defaults(fn=cmd_worker)

    s = sub.add_parser("predictivity", help="premature-vs-mature predictivity experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--run-dir", help="directory for the teacher and predictivity.json")
    s.add_argument("--pool", help="JSON-lines genome file (default: sample --n genomes)")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--budgets", type=int, nargs="+", help="premature budgets in steps")
    s.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0, 2.0, 5.0])
    s.add_argument("--pearson", action="store_true", help="Pearson instead of Spearman correlation")
    s.add_argument("--seed", type=int, help="override seeds.search (pool sampling)")
    s.set_defaults(fn=cmd_predictivity)

    s = sub.add_parser("rdm", help="compute an RDM file from an activation file")
    s.add_argument("activations")
    s.add_argument("--out", required=True)
    s.add_argument("--per-category", action="store_true")
    s.add_argument("--subsample", type=int, default=512, help="feature subsample size (0: all features)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_rdm)

    s = sub.add_parser("compare", help="Pearson r between two RDM files' upper triangles")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("report", help="write progress tables and chart for a run")
    s.add_argument("--run-dir", required=True)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("cost", help="total examples processed, M1*E1 + M2*E2")
    for name in ("m1", "e1", "m2", "e2"):
        s.add_argument(name, type=_nonneg_int)
    s.set_defaults(fn=cmd_cost)

    s = sub.add_parser("enumerate", help="enumerate a space to JSON lines")
    s.add_argument("--config")
    s.add_argument("--space", default="micro", choices=["micro", "layered", "cell"])
    s.add_argument("--out")
    s.add_argument("--cap", type=int, default=10**6)
    s.add_argument("--count", action="store_true", help="print the cardinality only")
    s.set_defaults(fn=cmd_enumerate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (FormatError, ConfigError, RsaError, SpaceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
