import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from idla.errors import ConfigError, IdlaError, SchemaError
from idla.pipeline import EXPERIMENTS, PROBES, ExperimentConfig, load_experiment_config, load_manifest_config, run
from idla.plot_data import KINDS, emit_plot_data

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

# flag dest -> ExperimentConfig field
FLAG_FIELDS = {
    "dim": "dimension",
    "n": "n",
    "particles": "particles",
    "radii": "radii",
    "gaps": "gaps",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "d2_variant": "d2_variant",
    "replicas": "replicas",
    "seed": "seed",
    "threads": "threads",
    "out": "output_dir",
    "budget_factor": "step_budget_factor",
    "snapshots": "snapshots",
    "probe": "probe",
    "grid": "grid",
    "z": "z",
    "R": "R",
    "depth": "depth",
    "escape_factor": "escape_factor",
    "cap_escape_factor": "cap_escape_factor",
    "trials": "trials",
    "k": "k",
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file; flags override its fields")
    p.add_argument("--manifest", default=None, help="Re-run the config stored in a manifest.json")
    p.add_argument("--dim", type=int, default=None, help="Lattice dimension (>= 2)")
    p.add_argument("--n", type=int, default=None, help="Nominal radius n (b(n) particles)")
    p.add_argument("--particles", type=int, default=None, help="Explicit particle count")
    p.add_argument("--radii", type=int, nargs="+", default=None, help="Radii for shape runs")
    p.add_argument("--gaps", type=int, nargs="+", default=None, help="Gaps n - |z| for directional runs")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--d2-variant", action="store_const", const=True, default=None,
                   help="h(n) = alpha*sqrt(log n * log log n)")
    p.add_argument("--replicas", type=int, default=None, help="Replicas (oracle-check: Monte Carlo clusters)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="Worker processes (default: all cores)")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--budget-factor", type=float, default=None, help="Walk step budget factor")
    p.add_argument("--snapshots", action="store_const", const=True, default=None,
                   help="Write cluster snapshots (shape runs)")
    p.add_argument("--probe", choices=PROBES, default=None)
    p.add_argument("--grid", type=float, nargs="+", default=None, help="Harmonic grid (lambda or distance)")
    p.add_argument("--z", type=int, nargs="+", default=None, help="Target site coordinates")
    p.add_argument("--R", type=float, default=None, help="Cap radius (joint-zero) or wave radius (abelian-check)")
    p.add_argument("--depth", type=float, default=None)
    p.add_argument("--escape-factor", type=float, default=None, help="Escape radius factor (hit-far)")
    p.add_argument("--cap-escape-factor", type=float, default=None,
                   help="Joint-zero cap depth cut at this multiple of |z|")
    p.add_argument("--trials", type=int, default=None, help="Launch-order permutations (abelian-check)")
    p.add_argument("--k", type=int, default=None, help="Particles for the exact oracle (<= 5)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idla", description="Internal DLA simulator and fluctuation experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _add_experiment_flags(sub.add_parser(name, help=f"Run the {name} experiment"))

    pd_ = sub.add_parser("plot-data", help="Aggregate a results CSV into plot-ready columns")
    pd_.add_argument("--input", required=True, help="results.csv of a previous run")
    pd_.add_argument("--kind", choices=KINDS, required=True)
    pd_.add_argument("--scale", type=float, default=1.0, help="R/|z|^(d-1) for zeroprob-vs-lambda")
    pd_.add_argument("--out", required=True, help="Output CSV path")
    return ap


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.manifest:
        cfg = load_manifest_config(Path(args.manifest))
    elif args.config:
        cfg = load_experiment_config(Path(args.config))
    else:
        cfg = ExperimentConfig()
    overrides: Dict[str, Any] = {"experiment": args.command}
    for dest, name in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides)


def _progress(message: str, fraction: float) -> None:
    log.info("[%3.0f%%] %s", 100 * fraction, message)


def _run_experiment(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    manifest = run(cfg, progress=_progress)
    out = Path(cfg.output_dir)
    print(f"✅ Done: {cfg.experiment}")
    print(f"   Output:   {out}")
    print(f"   Rows:     {manifest.summary.get('rows', 0):,}")
    for name, digest in manifest.digests.items():
        print(f"   {name}: sha256 {digest[:16]}…")
    for key, value in manifest.summary.items():
        if key != "rows":
            print(f"   {key}: {value}")


def _run_plot_data(args: argparse.Namespace) -> None:
    input_path = Path(args.input).expanduser().resolve()
    if not input_path.exists():
        raise ConfigError(f"input file does not exist: {input_path}")
    out = emit_plot_data(input_path, args.kind, Path(args.out), scale=args.scale)
    print(f"✅ Plot data ({args.kind}): {out}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "plot-data":
            _run_plot_data(args)
        else:
            _run_experiment(args)
    except (ConfigError, SchemaError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except IdlaError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
