import argparse
import json
import logging
import sys

from sqlalchemy import create_engine

from src.config import DATABASE_URL, DATA_REPORTS_DIR, TOPOLOGIES
from src.experiment import SWEEP_AXES, load_config, run_checks, run_experiment, run_sweep
from src.graph_spectra import make_graph, write_graph
from src.load import ensure_tables_exist

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-stm", description="Decentralized STM experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    spectra = sub.add_parser("spectra", help="Print the Laplacian spectrum bounds of a topology")
    spectra.add_argument("--topology", choices=TOPOLOGIES, default="path")
    spectra.add_argument("--m", type=int, default=8)
    spectra.add_argument("--seed", type=int, default=0)
    spectra.add_argument("--out", help="Optional JSON file for the graph")

    for name, help_text in (("run", "Run one configured experiment"), ("sweep", "Sweep one axis and fit a rate")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seeds", type=int, default=None, metavar="K", help="Run seeds 0..K-1")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--no-store", action="store_true", help="Skip the SQL upsert")
        if name == "sweep":
            p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
            p.add_argument("--values", type=float, nargs="+", required=True)

    check = sub.add_parser("check", help="Run the acceptance suite")
    check.add_argument("--out", default=None)
    check.add_argument("--quick", action="store_true")
    return parser


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.info(f"Starting {args.command}")

    if args.command == "spectra":
        try:
            graph = make_graph(args.topology, args.m, seed=args.seed)
            if args.out:
                write_graph(graph, args.out)
        except Exception as e:
            logging.error(f"Run failed during spectra: {e}")
            return 1
        print(json.dumps({
            "topology": args.topology,
            "m": graph.m,
            "lambda_max": graph.lambda_max,
            "lambda_min_plus": graph.lambda_min_plus,
            "chi": graph.chi,
        }, indent=2))
        return 0

    if args.command == "check":
        try:
            table = run_checks(out_dir=args.out or DATA_REPORTS_DIR, quick=args.quick)
        except Exception as e:
            logging.error(f"Run failed during checks: {e}")
            return 1
        print(table.to_string(index=False))
        return 0 if table["passed"].all() else 1

    # ------------------------------------------------------------------
    # Phase 1: Configuration
    # ------------------------------------------------------------------
    try:
        overrides = list(args.override)
        if args.seeds is not None:
            overrides.append(f"stochastic.seeds={json.dumps(list(range(args.seeds)))}")
        config = load_config(args.config, overrides)
    except Exception as e:
        logging.error(f"Run failed during configuration: {e}")
        return 2

    # ------------------------------------------------------------------
    # Phase 2: Storage
    # ------------------------------------------------------------------
    engine = None
    if config.output["store"] and not args.no_store:
        try:
            engine = create_engine(DATABASE_URL)
            ensure_tables_exist(engine)
        except Exception as e:
            logging.error(f"Run failed during storage setup: {e}")
            return 1

    # ------------------------------------------------------------------
    # Phase 3: Execution
    # ------------------------------------------------------------------
    try:
        if args.command == "run":
            outcome = run_experiment(config, out_dir=args.out, engine=engine)
            print(json.dumps(outcome.aggregate, indent=2, sort_keys=True))
            return 0 if outcome.aggregate["success_rate"] == 1.0 else 1

        table, fit = run_sweep(config, args.axis, args.values, out_dir=args.out, engine=engine)
        print(table.to_string(index=False))
        if fit is not None:
            print(f"slope={fit.slope:.4f} r2={fit.r_squared:.4f}")
        return 0
    except Exception as e:
        logging.error(f"Run failed during {args.command}: {e}")
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
