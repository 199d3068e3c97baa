"""
Main Entry Point - Streaming Test-Time Spectral Calibration bench
Commands: train, run, compare, verify, synth
"""
import os
import sys
import argparse
from pathlib import Path

# Add src to Python path
ROOT_DIR = Path(__file__).parent
SRC_DIR = ROOT_DIR / 'src'
sys.path.insert(0, str(SRC_DIR))

# Load environment variables
from dotenv import load_dotenv

from modules.bench import BenchHarness
from modules.errors import InvalidConfig, STTCError
from modules.settings import load_run_config
from modules.verification import DEFAULT_ETA_GRID


def _parse_sets(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidConfig(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip().lower()] = value.strip()
    return overrides


def _parse_grid(text):
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"--eta-grid must be comma-separated numbers, got '{text}'")
    if not grid or min(grid) <= 0:
        raise InvalidConfig("--eta-grid needs positive learning rates")
    return grid


def _default_out(args, name):
    """--out wins; otherwise STTC_OUT_DIR/<name> when the variable is set."""
    if args.out:
        return args.out
    out_dir = os.getenv("STTC_OUT_DIR")
    return str(Path(out_dir) / name) if out_dir else None


def build_parser():
    parser = argparse.ArgumentParser(prog="sttc", description="Streaming test-time spectral calibration bench")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.getenv("STTC_CONFIG"), help="key = value run config file")
    common.add_argument("--out", help="report output path")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="fit scaler + backbone on the train split")

    run = sub.add_parser("run", parents=[common], help="stream the test split")
    run.add_argument("--ttc", choices=["on", "off"], default="on", help="enable test-time calibration")
    run.add_argument("--seeds", type=int, default=1, help="repeat with seed, seed+1, ...")
    run.add_argument("--queue-rule", choices=["strict", "listing"], help="queue dequeue rule")

    compare = sub.add_parser("compare", parents=[common], help="baseline vs calibrated report")
    compare.add_argument("baseline", help="report from run --ttc off")
    compare.add_argument("calibrated", help="report from run --ttc on")

    verify = sub.add_parser("verify", parents=[common], help="run the property battery")
    verify.add_argument("--cases", type=int, default=1000, help="perturbation-bound cases")
    verify.add_argument("--eta-grid", default=",".join(str(e) for e in DEFAULT_ETA_GRID), help="descent learning rates")
    verify.add_argument("--break-bound", action="store_true", help=argparse.SUPPRESS)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("spec", help="synthetic spec file")
    synth.add_argument("out_prefix", help="output prefix (writes .sttc, .csv, .provenance.json)")
    return parser


def dispatch(args):
    overrides = _parse_sets(args.set)
    if args.seed is not None and args.command != "synth":
        overrides["seed"] = args.seed
    if getattr(args, "queue_rule", None):
        overrides["queue_rule"] = args.queue_rule
    config = load_run_config(args.config, overrides)
    bench = BenchHarness(config)

    if args.command == "train":
        bench.train()
    elif args.command == "run":
        bench.run(ttc=args.ttc == "on", seeds=args.seeds, out=_default_out(args, "report.json"))
        bench.print_summary()
    elif args.command == "compare":
        bench.compare(args.baseline, args.calibrated, out=_default_out(args, "comparison.json"))
    elif args.command == "verify":
        if args.cases < 1:
            raise InvalidConfig("--cases must be at least 1")
        bench.verify(args.cases, _parse_grid(args.eta_grid), args.break_bound, out=_default_out(args, "verify.json"))
    elif args.command == "synth":
        bench.synth(args.spec, args.out_prefix, seed=args.seed)


def main(argv=None):
    """Main entry point; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)

    print("\n" + "=" * 50)
    print(f"🚀 STTC BENCH: {args.command.upper()}")
    print("=" * 50 + "\n")
    try:
        dispatch(args)
    except STTCError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        print(f"❌ Missing file: {e}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
