import csv
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import idla
from idla.aggregation import Cluster, grow_from_origin, grow_from_starts, three_wave_build, write_snapshot
from idla.errors import ConfigError, IdlaError, InsufficientResolution, StepBudgetExceeded
from idla.exact_oracle import (
    MAX_EXACT_PARTICLES,
    ShapeDistribution,
    empirical_shape_distribution,
    export_distribution_csv,
    parse_shape_key,
    shape_key,
    tv_distance,
)
from idla.fluctuations import (
    ErrorRecord,
    ScalingProfile,
    bound_violations,
    deep_hole_experiment,
    directional_miss,
    error_record,
    scaling_fit,
    tentacle_experiment,
)
from idla.harmonic import (
    Estimate,
    HarmonicConfig,
    fit_exit_constant,
    fit_green_constant,
    fit_joint_zero,
    hit_before_exit,
    hit_prob_far,
    joint_zero_frequency,
)
from idla.lattice import axis_site, ball_count, make_site, neighbors, origin, rho
from idla.oracle_store import OracleStore, OracleStoreConfig
from idla.walks import InstructionStacks, RngStream, WalkConfig

log = logging.getLogger(__name__)

ProgressCB = Optional[Callable[[str, float], None]]  # (message, progress 0..1)

EXPERIMENTS = (
    "grow",
    "abelian-check",
    "shape",
    "directional",
    "tentacle",
    "deep-hole",
    "harmonic",
    "oracle-check",
)
PROBES = ("joint-zero", "hit-far", "hit-before-exit")

HEADERS: Dict[str, List[str]] = {
    "grow": ["replica", "n", "delta_inner", "delta_outer", "seed"],
    "shape": ["replica", "n", "delta_inner", "delta_outer", "seed"],
    "abelian-check": ["replica", "trial", "identical", "size", "seed"],
    "directional": ["replica", "n", "gap", "miss", "seed"],
    "tentacle": [
        "replica", "n", "X_n", "lambda_n", "x_bound_ok", "delta_inner", "protrudes", "cov_sites",
        "stopped_sites", "R_n", "delta_outer_Rn", "outer_event", "seed",
    ],
    "deep-hole": [
        "replica", "k", "R_k", "X_k", "lambda_k", "zk_norm", "event_A", "event_C", "event_I", "event_outer", "seed",
    ],
    "harmonic": ["grid_value", "estimate", "stderr", "replicas", "seed"],
    "oracle-check": ["k", "dim", "samples", "tv", "seed"],
}

RESULTS_NAME = "results.csv"
MANIFEST_NAME = "manifest.json"
ORACLE_TABLE_NAME = "oracle_table.csv"
ORACLE_DB_NAME = "oracle.sqlite"
# oracle-check samples are split over this many tasks whatever the worker count
ORACLE_CHUNKS = 16


# ---------------------------
# Config
# ---------------------------

@dataclass
class ExperimentConfig:
    experiment: str = "grow"
    dimension: int = 2
    n: Optional[int] = None
    radii: List[int] = field(default_factory=list)
    particles: Optional[int] = None
    gaps: List[int] = field(default_factory=list)
    alpha: float = 0.4
    beta: float = 0.4
    gamma: float = 1.0
    d2_variant: bool = False
    replicas: int = 1
    seed: Optional[int] = None
    threads: Optional[int] = None
    output_dir: str = "out"
    step_budget_factor: float = 1e4
    snapshots: bool = False
    # harmonic
    probe: str = "joint-zero"
    grid: List[float] = field(default_factory=list)
    z: Optional[List[int]] = None
    R: Optional[float] = None
    depth: Optional[float] = None
    escape_factor: float = 100.0
    cap_escape_factor: float = 8.0
    # abelian-check
    trials: int = 20
    # oracle-check; replicas is the number of Monte Carlo samples
    k: int = 3

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown config fields", [f"{k}: not a config field" for k in unknown])
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def resolved_threads(self) -> int:
        return self.threads if self.threads else (os.cpu_count() or 1)

    def profile(self) -> ScalingProfile:
        return ScalingProfile(self.alpha, self.beta, self.gamma, self.d2_variant)

    def walk_config(self) -> WalkConfig:
        return WalkConfig(step_budget_factor=self.step_budget_factor)

    def harmonic_config(self) -> HarmonicConfig:
        return HarmonicConfig(escape_factor=self.escape_factor, cap_escape_factor=self.cap_escape_factor,
                              walk=self.walk_config())

    def z_site(self) -> Tuple[int, ...]:
        if self.z:
            return make_site(self.z)
        return axis_site(self.dimension, int(self.n or 0))

    def validate(self) -> List[str]:
        diags: List[str] = []
        if self.experiment not in EXPERIMENTS:
            diags.append(f"experiment: must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if not isinstance(self.dimension, int) or self.dimension < 2:
            diags.append(f"dimension: must be an integer >= 2, got {self.dimension!r}")
        if not isinstance(self.replicas, int) or self.replicas < 1:
            diags.append(f"replicas: must be an integer >= 1, got {self.replicas!r}")
        if self.seed is None:
            diags.append("seed: required (no wall-clock default)")
        if self.threads is not None and self.threads < 1:
            diags.append(f"threads: must be >= 1, got {self.threads}")
        if self.step_budget_factor <= 0:
            diags.append(f"step_budget_factor: must be > 0, got {self.step_budget_factor}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                diags.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.n is not None and self.n < 1:
            diags.append(f"n: must be >= 1, got {self.n}")

        exp = self.experiment
        if exp in ("grow", "abelian-check") and self.n is None and self.particles is None:
            diags.append(f"n or particles: {exp} needs a particle count")
        if exp == "shape" and self.n is None and not self.radii:
            diags.append("n or radii: shape needs at least one radius")
        if exp in ("directional", "tentacle", "deep-hole") and self.n is None:
            diags.append(f"n: required for {exp}")
        if exp == "directional":
            if not self.gaps:
                diags.append("gaps: directional needs at least one gap")
            elif self.n is not None and any(g <= 0 or g > self.n for g in self.gaps):
                diags.append(f"gaps: every gap must lie in (0, {self.n}]")
        if exp == "tentacle" and self.n is not None and self.n < 10:
            diags.append("n: tentacle needs n >= 10")
        if exp == "deep-hole":
            if self.n is not None and self.n < 10:
                diags.append("n: deep-hole needs n >= 10")
            if self.alpha <= 0:
                diags.append("alpha: deep-hole needs alpha > 0")
            if self.beta < self.alpha:
                diags.append("beta: deep-hole needs beta >= alpha")
        if exp == "abelian-check" and self.trials < 1:
            diags.append(f"trials: must be >= 1, got {self.trials}")
        if exp == "harmonic":
            if self.probe not in PROBES:
                diags.append(f"probe: must be one of {', '.join(PROBES)}, got {self.probe!r}")
            if not self.grid:
                diags.append("grid: harmonic needs a non-empty grid")
            if not self.z and self.n is None:
                diags.append("z: harmonic needs z (or n for z = n·e1)")
            if self.z and len(self.z) != self.dimension:
                diags.append(f"z: must have {self.dimension} coordinates")
            if self.probe == "joint-zero" and (self.R is None or self.R <= 0):
                diags.append("R: joint-zero needs a cap radius R > 0")
            if self.probe == "hit-before-exit" and (self.depth is None or self.depth <= 0):
                diags.append("depth: hit-before-exit needs depth > 0")
            if self.probe == "hit-far" and self.dimension < 3:
                diags.append("dimension: hit-far needs d >= 3")
            if self.cap_escape_factor <= 1:
                diags.append(f"cap_escape_factor: must be > 1, got {self.cap_escape_factor}")
        if exp == "oracle-check":
            if not 0 <= self.k <= MAX_EXACT_PARTICLES:
                diags.append(f"k: must lie in [0, {MAX_EXACT_PARTICLES}], got {self.k}")
        return diags


def load_experiment_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {path}", [str(e)]) from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file must hold one JSON object: {path}")
    return ExperimentConfig.from_mapping(data)


def load_manifest_config(path: Path) -> ExperimentConfig:
    """Config snapshot of a previous run, for exact re-runs."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return ExperimentConfig.from_mapping(data["config"])


# ---------------------------
# Output helpers
# ---------------------------

def _cell(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row[c]) for c in header])
    return path


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------
# Tasks
# ---------------------------

@dataclass
class TaskResult:
    task: int
    rows: List[Dict[str, Any]] = field(default_factory=list)
    files: List[str] = field(default_factory=list)
    payload: Dict[str, Any] = field(default_factory=dict)


def _particles(cfg: ExperimentConfig) -> int:
    if cfg.particles is not None:
        return int(cfg.particles)
    return ball_count(cfg.dimension, cfg.n)


def _nominal_radius(cfg: ExperimentConfig) -> int:
    if cfg.n is not None:
        return int(cfg.n)
    return rho(cfg.dimension, _particles(cfg))


def _task_grow(cfg: ExperimentConfig, replica: int) -> TaskResult:
    dim, n = cfg.dimension, _nominal_radius(cfg)
    cluster = grow_from_origin(dim, _particles(cfg), RngStream(cfg.seed, replica),
                               extent=2 * n + 2, config=cfg.walk_config())
    rec = error_record(cluster, n, cfg.seed, replica)
    snap = write_snapshot(cluster, Path(cfg.output_dir) / f"cluster_{replica}.txt", cfg.seed)
    return TaskResult(replica, [asdict(rec)], [snap.name])


def _abelian_starts(dim: int, total: int) -> List[Tuple[int, ...]]:
    # origin and its neighbours in turn, so launch order actually matters
    sites = [origin(dim)] + neighbors(origin(dim))
    return [sites[i % len(sites)] for i in range(total)]


def _task_abelian(cfg: ExperimentConfig, replica: int) -> TaskResult:
    dim, total, wc = cfg.dimension, _particles(cfg), cfg.walk_config()
    starts = _abelian_starts(dim, total)
    reference = grow_from_starts(Cluster(dim), starts, InstructionStacks(cfg.seed, dim, replica), wc).sites()
    order = RngStream(cfg.seed, replica, (1,))
    rows = []
    for trial in range(1, cfg.trials + 1):
        perm = [starts[i] for i in order.permutation(total)]
        got = grow_from_starts(Cluster(dim), perm, InstructionStacks(cfg.seed, dim, replica), wc).sites()
        rows.append({"replica": replica, "trial": trial, "identical": got == reference,
                     "size": len(got), "seed": cfg.seed})

    # three-wave build against origin-only growth with the same stacks
    first = (2 * total) // 5
    R = cfg.R if cfg.R else max(1, rho(dim, total) // 2)
    plain = grow_from_origin(dim, total, InstructionStacks(cfg.seed, dim, replica), config=wc).sites()
    waves = three_wave_build(first, total - first, R, InstructionStacks(cfg.seed, dim, replica), config=wc).sites()
    rows.append({"replica": replica, "trial": cfg.trials + 1, "identical": waves == plain,
                 "size": len(waves), "seed": cfg.seed})
    return TaskResult(replica, rows)


def _task_shape(cfg: ExperimentConfig, replica: int) -> TaskResult:
    dim = cfg.dimension
    radii = cfg.radii or [cfg.n]
    rows, files = [], []
    for r in radii:
        cluster = grow_from_origin(dim, ball_count(dim, r), RngStream(cfg.seed, replica, (r,)),
                                   extent=2 * r + 2, config=cfg.walk_config())
        rows.append(asdict(error_record(cluster, r, cfg.seed, replica)))
        if cfg.snapshots:
            snap = write_snapshot(cluster, Path(cfg.output_dir) / f"cluster_{replica}_n{r}.txt", cfg.seed)
            files.append(snap.name)
    return TaskResult(replica, rows, files)


def _task_directional(cfg: ExperimentConfig, replica: int) -> TaskResult:
    dim, n = cfg.dimension, cfg.n
    cluster = grow_from_origin(dim, ball_count(dim, n), RngStream(cfg.seed, replica),
                               extent=2 * n + 2, config=cfg.walk_config())
    rows = [
        {"replica": replica, "n": n, "gap": g, "miss": directional_miss(cluster, axis_site(dim, n - g)),
         "seed": cfg.seed}
        for g in cfg.gaps
    ]
    return TaskResult(replica, rows)


def _task_tentacle(cfg: ExperimentConfig, replica: int) -> TaskResult:
    report = tentacle_experiment(cfg.n, cfg.profile(), RngStream(cfg.seed, replica), cfg.dimension,
                                 cfg.walk_config())
    row = report.as_row()
    row.update(replica=replica, seed=cfg.seed)
    return TaskResult(replica, [row], payload={"protrudes": report.protrudes, "cov_sites": len(report.cov_sites)})


def _task_deep_hole(cfg: ExperimentConfig, replica: int) -> TaskResult:
    records = deep_hole_experiment(cfg.n, cfg.profile(), RngStream(cfg.seed, replica), cfg.dimension,
                                   cfg.walk_config())
    rows = []
    for rec in records:
        row = asdict(rec)
        row.update(replica=replica, seed=cfg.seed)
        rows.append(row)
    final = records[-1].cluster_size if records else ball_count(cfg.dimension, cfg.n)
    conserved = final == ball_count(cfg.dimension, cfg.n) + sum(r.X_k for r in records)
    return TaskResult(replica, rows, payload={
        "bound_violations": bound_violations(records),
        "waves": len(records),
        "event_C": sum(r.event_C for r in records),
        "conserved": conserved,
    })


def _task_harmonic(cfg: ExperimentConfig, index: int) -> TaskResult:
    value = cfg.grid[index]
    z = cfg.z_site()
    stream = RngStream(cfg.seed, index)
    hc = cfg.harmonic_config()
    if cfg.probe == "joint-zero":
        est = joint_zero_frequency(value, z, cfg.R, cfg.replicas, stream, config=hc)
    else:
        t = int(value)
        if cfg.probe == "hit-far":
            y = tuple(c + (t if i == 0 else 0) for i, c in enumerate(z))
            est = hit_prob_far(y, z, cfg.escape_factor, cfg.replicas, stream, hc)
        else:
            y = tuple(c - (t if i == 0 else 0) for i, c in enumerate(z))
            est = hit_before_exit(y, z, cfg.depth, cfg.replicas, stream, hc)
    row = {"grid_value": float(value), "estimate": est.value, "stderr": est.stderr,
           "replicas": est.replicas, "seed": cfg.seed}
    return TaskResult(index, [row], payload={"estimate": asdict(est)})


def _oracle_chunks(cfg: ExperimentConfig) -> int:
    return min(ORACLE_CHUNKS, cfg.replicas)


def _oracle_share(cfg: ExperimentConfig, task: int) -> int:
    base, extra = divmod(cfg.replicas, _oracle_chunks(cfg))
    return base + (1 if task < extra else 0)


def _task_oracle(cfg: ExperimentConfig, task: int) -> TaskResult:
    share = _oracle_share(cfg, task)
    counts: Dict[str, int] = {}
    if share:
        emp = empirical_shape_distribution(cfg.k, cfg.dimension, share, RngStream(cfg.seed, task))
        counts = {shape_key(s): int(round(p * share)) for s, p in emp.probabilities.items()}
    return TaskResult(task, payload={"counts": counts, "samples": share})


TASKS: Dict[str, Callable[[ExperimentConfig, int], TaskResult]] = {
    "grow": _task_grow,
    "abelian-check": _task_abelian,
    "shape": _task_shape,
    "directional": _task_directional,
    "tentacle": _task_tentacle,
    "deep-hole": _task_deep_hole,
    "harmonic": _task_harmonic,
    "oracle-check": _task_oracle,
}


def task_ids(cfg: ExperimentConfig) -> List[int]:
    if cfg.experiment == "harmonic":
        return list(range(len(cfg.grid)))
    if cfg.experiment == "oracle-check":
        return list(range(_oracle_chunks(cfg)))
    return list(range(cfg.replicas))


def _run_task(args: Tuple[Dict[str, Any], int]) -> TaskResult:
    cfg_dict, task = args
    cfg = ExperimentConfig.from_mapping(cfg_dict)
    try:
        return TASKS[cfg.experiment](cfg, task)
    except StepBudgetExceeded as e:
        raise StepBudgetExceeded(f"task {task} (seed {cfg.seed}): {e}", e.state, e.budget, e.start) from e
    except IdlaError as e:
        raise IdlaError(f"task {task} (seed {cfg.seed}): {e}") from e


# ---------------------------
# Finalizing
# ---------------------------

def _summarize(cfg: ExperimentConfig, results: List[TaskResult], out_dir: Path) -> Tuple[List[str], Dict[str, Any]]:
    """Experiment-level summary and extra output files."""
    exp = cfg.experiment
    rows = [row for r in results for row in r.rows]
    summary: Dict[str, Any] = {}
    extra: List[str] = []

    if exp in ("grow", "shape") and rows:
        by_n: Dict[int, List[Dict[str, Any]]] = {}
        for row in rows:
            by_n.setdefault(row["n"], []).append(row)
        summary["mean_delta"] = {
            str(n): {
                "inner": sum(r["delta_inner"] for r in rs) / len(rs),
                "outer": sum(r["delta_outer"] for r in rs) / len(rs),
            }
            for n, rs in sorted(by_n.items())
        }
        if len(by_n) >= 3:
            records = [ErrorRecord(r["n"], r["delta_inner"], r["delta_outer"]) for r in rows]
            slope, stderr = scaling_fit(records)
            summary["scaling_fit"] = {"slope": slope, "stderr": stderr}
    elif exp == "abelian-check":
        summary["all_identical"] = all(r["identical"] for r in rows)
    elif exp == "directional":
        per_gap: Dict[int, List[bool]] = {}
        for row in rows:
            per_gap.setdefault(row["gap"], []).append(row["miss"])
        summary["miss_frequency"] = {str(g): sum(v) / len(v) for g, v in sorted(per_gap.items())}
    elif exp == "tentacle":
        summary["protrusion_frequency"] = sum(r.payload["protrudes"] for r in results) / len(results)
    elif exp == "deep-hole":
        waves = sum(r.payload["waves"] for r in results)
        summary["bound_violations"] = sum(r.payload["bound_violations"] for r in results)
        summary["event_C_frequency"] = sum(r.payload["event_C"] for r in results) / waves if waves else 1.0
        summary["conserved"] = all(r.payload["conserved"] for r in results)
    elif exp == "harmonic":
        estimates = [Estimate(**r.payload["estimate"]) for r in results]
        try:
            if cfg.probe == "joint-zero":
                fit = fit_joint_zero(cfg.grid, estimates, cfg.z_site(), cfg.R)
            elif cfg.probe == "hit-far":
                fit = fit_green_constant(cfg.grid, estimates, cfg.dimension)
            else:
                fit = fit_exit_constant(cfg.grid, estimates, cfg.depth, cfg.dimension)
            summary["fit"] = {"name": fit.name, "constant": fit.fitted_constant,
                              "r_squared": fit.r_squared, "band": list(fit.confidence_band)}
        except InsufficientResolution as e:
            log.warning("%s fit skipped: %s", cfg.probe, e)
            summary["fit"] = None
    elif exp == "oracle-check":
        counts: Counter = Counter()
        for r in results:
            counts.update(r.payload["counts"])
        total = sum(r.payload["samples"] for r in results)
        empirical = ShapeDistribution(cfg.dimension, {parse_shape_key(s): c / total for s, c in counts.items()})
        store = OracleStore(out_dir / ORACLE_DB_NAME, OracleStoreConfig())
        exact = store.get_distribution(cfg.k, cfg.dimension)
        tv = tv_distance(exact, empirical)
        rows.append({"k": cfg.k, "dim": cfg.dimension, "samples": total, "tv": tv, "seed": cfg.seed})
        export_distribution_csv(exact, out_dir / ORACLE_TABLE_NAME)
        extra.append(ORACLE_TABLE_NAME)
        summary["tv"] = tv

    write_rows(out_dir / RESULTS_NAME, HEADERS[exp], rows)
    summary["rows"] = len(rows)
    return extra, summary


# ---------------------------
# Run
# ---------------------------

@dataclass
class RunManifest:
    config: Dict[str, Any]
    version: str
    seeds: List[Dict[str, int]]
    digests: Dict[str, str]
    summary: Dict[str, Any] = field(default_factory=dict)

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(asdict(self), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def run(config: ExperimentConfig, progress: ProgressCB = None) -> RunManifest:
    """
    Runs one experiment into config.output_dir: results.csv, snapshots
    (grow, or shape with snapshots=True) and manifest.json.
    """
    diags = config.validate()
    if diags:
        raise ConfigError("invalid experiment config", diags)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = config.to_dict()
    ids = task_ids(config)
    threads = min(config.resolved_threads(), max(1, len(ids)))
    log.info("%s: %d tasks on %d worker(s) -> %s", config.experiment, len(ids), threads, out_dir)

    results: List[TaskResult] = []
    jobs = [(cfg_dict, i) for i in ids]
    if threads == 1:
        for done, job in enumerate(jobs, start=1):
            results.append(_run_task(job))
            if progress:
                progress(f"{config.experiment}: task {done}/{len(jobs)}", done / len(jobs))
    else:
        with Pool(threads) as pool:
            for done, res in enumerate(pool.imap(_run_task, jobs), start=1):
                results.append(res)
                if progress:
                    progress(f"{config.experiment}: task {done}/{len(jobs)}", done / len(jobs))
    results.sort(key=lambda r: r.task)

    extra, summary = _summarize(config, results, out_dir)
    files = [RESULTS_NAME] + extra + [f for r in results for f in r.files]
    digests = {name: file_digest(out_dir / name) for name in sorted(files)}
    seeds = [{"replica": i, "seed": config.seed, "stream_id": i} for i in ids]
    manifest = RunManifest(cfg_dict, idla.__version__, seeds, digests, summary)
    manifest.write(out_dir / MANIFEST_NAME)

    if progress:
        progress(f"{config.experiment}: done.", 1.0)
    return manifest
