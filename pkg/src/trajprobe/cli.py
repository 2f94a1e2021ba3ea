"""Command line: ``trajprobe run|grid|report|gen``.

Exit codes: 0 success, 1 runtime failure (stage named on stderr),
2 configuration/validation failure (field paths on stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cohort import GeneratorSpec, generate_synthetic_cohort, write_cohort_csv
from .config import ConfigValidationError, load_config
from .errors import ConfigurationError
from .runner import StageError, paper_grid, reemit_plots, run_experiment, run_grid


def _validation_failure(exc: ConfigValidationError) -> int:
    for path, msg in exc.problems:
        print(f"config error at {path}: {msg}", file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigValidationError as exc:
        return _validation_failure(exc)
    try:
        result = run_experiment(config, args.out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    r = result.report
    print(f"wrote {result.output_dir} (correlation gap: {r.correlation_gap})")
    for m in r.marginals:
        print(f"  {m.feature:<16} {m.kind} {m.value:.4f}")
    return 0


def cmd_grid(args) -> int:
    if args.preset != "paper":
        print(f"config error at preset: unknown preset {args.preset!r}", file=sys.stderr)
        return 2
    sizes = None
    if args.n_patients is not None:
        sizes = {"art_hiv": args.n_patients, "hypotension": args.n_patients}
    docs = paper_grid(args.out, args.master_seed, sizes, args.decoding)
    try:
        rows = run_grid(docs, args.out, workers=args.workers)
    except ConfigValidationError as exc:
        return _validation_failure(exc)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for row in rows:
        print(f"{row['run']:<40} gap={row['correlation_gap']}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.input)
    if not (run_dir / "report.json").is_file():
        print(f"error: no report.json in {run_dir}", file=sys.stderr)
        return 1
    for p in reemit_plots(run_dir):
        print(p)
    return 0


def cmd_gen(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = GeneratorSpec.from_dict(doc)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error at <file>: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        print(f"config error at spec: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    cohort = generate_synthetic_cohort(spec, seed)
    write_cohort_csv(cohort, args.out)
    print(f"wrote {len(cohort)} patients x {spec.schema.sequence_length} steps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="override output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run a preset grid of experiments")
    p.add_argument("--preset", default="paper")
    p.add_argument("--out", required=True)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--n-patients", type=int, default=None,
                   help="cohort size for every dataset (default: the published cohort sizes)")
    p.add_argument("--decoding", choices=("sample", "argmax"), default="sample")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="re-emit plots from an existing run directory")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen", help="write a synthetic cohort to CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
