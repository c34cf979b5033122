from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats

from idla.aggregation import (
    Cluster,
    ParticleConfig,
    grow_from_origin,
    grow_from_starts,
    grow_sequential,
    poisson_sample,
    release_tracking_hits,
    wave_run,
)
from idla.errors import DomainError, IdlaError
from idla.lattice import (
    Site,
    axis_site,
    ball_count,
    ball_sites,
    cap_and_complement,
    lower_limit,
    norm,
    norm2,
    origin,
    rho,
    shell_count,
    sites_with_norm2,
    strict_limit,
)
from idla.walks import DEFAULT_WALK_CONFIG, RngStream, WalkConfig

log = logging.getLogger(__name__)


# ---------------------------
# Records and profiles
# ---------------------------

@dataclass
class ErrorRecord:
    n: int
    delta_inner: float
    delta_outer: float
    seed: int = 0
    replica: int = 0


def _log(n: float) -> float:
    return math.log(n) if n > 1 else 0.0


@dataclass(frozen=True)
class ScalingProfile:
    """h(n) = α√log n, L̄(n) = β√log n, L(n) = γ√log n."""

    alpha: float
    beta: float
    gamma: float
    d2_variant: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise DomainError(f"profile {name} must be >= 0, got {getattr(self, name)}")

    def h(self, n: float) -> float:
        if self.d2_variant:
            return self.alpha * math.sqrt(_log(n) * max(0.0, _log(_log(n))))
        return self.alpha * math.sqrt(_log(n))

    def Lbar(self, n: float) -> float:
        return self.beta * math.sqrt(_log(n))

    def L(self, n: float) -> float:
        return self.gamma * math.sqrt(_log(n))

    def telescope_widths(self, n: float) -> List[float]:
        """Shell widths R/(i log R), i = 1..R, with R = ⌊4h(n) + L(n)⌋."""
        R = int(math.floor(4 * self.h(n) + self.L(n)))
        if R < 2:
            return []
        return [R / (i * math.log(R)) for i in range(1, R + 1)]


# ---------------------------
# Error functionals
# ---------------------------

def inner_error(cluster: Cluster, n: float) -> float:
    """δ_I(n) = n − min{‖z‖ : z ∉ cluster}."""
    return n - math.sqrt(cluster.min_unoccupied_norm2)


def inner_error_by_scan(cluster: Cluster, n: float) -> float:
    """n − sup{r : 𝔹(0,r) ⊆ cluster}, by scanning whole balls."""
    k = 0
    while True:
        # 𝔹(0, √(k+1)) adds the sites of norm² == k
        if not all(site in cluster for site in sites_with_norm2(cluster.dim, k)):
            return n - math.sqrt(k)
        k += 1


def outer_error(cluster: Cluster, n: float) -> float:
    """δ_O(n) = max{‖z‖ : z ∈ cluster} − n."""
    if len(cluster) == 0:
        raise DomainError("outer error of an empty cluster is undefined")
    return math.sqrt(cluster.max_occupied_norm2) - n


def error_record(cluster: Cluster, n: int, seed: int = 0, replica: int = 0) -> ErrorRecord:
    return ErrorRecord(n, inner_error(cluster, n), outer_error(cluster, n), seed, replica)


def check_error_bounds(cluster: Cluster, record: ErrorRecord) -> List[str]:
    """Direct scan of 𝔹(0, n − δ_I) ⊆ cluster ⊆ closed ball of radius n + δ_O."""
    problems = []
    inner_r = record.n - record.delta_inner
    for site in ball_sites(cluster.dim, max(0.0, inner_r)):
        if site not in cluster:
            problems.append(f"hole {site} inside radius {inner_r}")
            break
    outer_r = record.n + record.delta_outer
    for site in cluster:
        if norm(site) > outer_r + 1e-9:
            problems.append(f"site {site} beyond radius {outer_r}")
            break
    return problems


def directional_miss(cluster: Cluster, z: Site) -> bool:
    return z not in cluster


# ---------------------------
# Mean visits vs gap
# ---------------------------

@dataclass
class VisitRow:
    gap: int
    mean: float
    stderr: float
    replicas: int


def mean_visits_lower_trend(
    n: int,
    gaps: Sequence[int],
    replicas: int,
    dim: int = 2,
    seed: int = 0,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> List[VisitRow]:
    """
    Mean of W_R(z) for z = (n − g, 0, …), R = ‖z‖, from b(n) explorers
    launched on the empty lattice.
    """
    if replicas <= 0:
        raise DomainError("mean visit table needs at least one replica")
    if not gaps:
        raise DomainError("mean visit table needs at least one gap")
    b = ball_count(dim, n)
    rows = []
    for g in gaps:
        if g <= 0 or g > n:
            raise DomainError(f"gap must lie in (0, {n}], got {g}")
        if g == n:
            # every explorer stands on the origin at time 0
            rows.append(VisitRow(g, float(b), 0.0, replicas))
            continue
        z = axis_site(dim, n - g)
        samples = np.empty(replicas)
        for r in range(replicas):
            stream = RngStream(seed, r, (g,))
            outcome = wave_run(Cluster(dim, extent=n + 1), ParticleConfig.point(origin(dim), b), n - g, stream,
                               track_free_exits=False, config=config)
            samples[r] = outcome.visits.get(z, 0)
        se = float(samples.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
        rows.append(VisitRow(g, float(samples.mean()), se, replicas))
    return rows


def visits_per_gap_bound(rows: Sequence[VisitRow], z_score: float = 1.645) -> Tuple[float, float]:
    """(min mean/gap, one-sided lower confidence bound of that constant)."""
    if not rows:
        raise DomainError("empty visit table")
    point = min(r.mean / r.gap for r in rows)
    lower = min((r.mean - z_score * r.stderr) / r.gap for r in rows)
    return point, lower


# ---------------------------
# Tentacles
# ---------------------------

@dataclass
class TentacleReport:
    n: int
    b_n: int
    lambda_n: float
    X_n: int
    x_bound_ok: bool
    delta_inner: float
    inner_ok: bool
    sigma_radius: float
    threshold: float
    stopped_sites: int
    coupling_equal_fraction: float
    cov_sites: List[Site]
    protrudes: bool
    R_n: int
    delta_outer_Rn: float
    outer_event: bool
    rn_bound_ok: bool
    wave_size_ok: bool
    final_size: int
    telescope_widths: List[float] = field(default_factory=list)

    def as_row(self) -> Dict[str, object]:
        row = asdict(self)
        row["cov_sites"] = len(self.cov_sites)
        row.pop("telescope_widths")
        return row


def tentacle_experiment(
    n: int,
    profile: ScalingProfile,
    randomness: RngStream,
    dim: int = 2,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> TentacleReport:
    """
    Three waves: b(n) explorers, X_n ~ Poisson(λ_n) green explorers stopped
    on ∂𝔹(0, n − L(n)), then their release. Tentacles are observed, not
    forced.
    """
    if n < 10:
        raise DomainError(f"tentacle experiment needs n >= 10, got {n}")
    sigma_radius = n - profile.L(n)
    if sigma_radius <= 0:
        raise DomainError(f"n - L(n) = {sigma_radius} must be > 0")

    b = ball_count(dim, n)
    cluster = grow_from_origin(dim, b, randomness, extent=2 * n + 1, config=config)
    delta_inner = inner_error(cluster, n)

    h_n = profile.h(n)
    lam = shell_count(dim, n, n + h_n)
    x_n = poisson_sample(lam, randomness.fork())

    green = wave_run(cluster, ParticleConfig.point(origin(dim), x_n), sigma_radius, randomness,
                     continuation=randomness.fork(), config=config)
    boundary = set(green.visits) | set(green.free_exits)
    limit2 = strict_limit(sigma_radius)
    boundary = [z for z in boundary if norm2(z) > limit2]
    equal = sum(1 for z in boundary if green.visits.get(z, 0) == green.free_exits.get(z, 0))
    equal_fraction = equal / len(boundary) if boundary else 1.0

    grow_sequential(cluster, green.stopped, randomness, config)
    if len(cluster) != b + x_n:
        raise IdlaError(f"particle conservation broken: {len(cluster)} != {b} + {x_n}")

    threshold = n + 4 * h_n
    reach2 = lower_limit(threshold)
    cov_stream = randomness.fork()
    cov_sites = []
    for z in green.stopped.support():
        alone = grow_from_starts(Cluster(dim), [z] * green.stopped.counts[z], cov_stream, config)
        if alone.max_occupied_norm2 >= reach2:
            cov_sites.append(z)

    r_n = rho(dim, b + x_n)
    delta_outer_rn = outer_error(cluster, r_n)
    report = TentacleReport(
        n=n,
        b_n=b,
        lambda_n=float(lam),
        X_n=x_n,
        x_bound_ok=x_n <= 2 * lam,
        delta_inner=delta_inner,
        inner_ok=delta_inner < profile.L(n),
        sigma_radius=sigma_radius,
        threshold=threshold,
        stopped_sites=len(green.stopped.counts),
        coupling_equal_fraction=equal_fraction,
        cov_sites=cov_sites,
        protrudes=cluster.max_occupied_norm2 >= reach2,
        R_n=r_n,
        delta_outer_Rn=delta_outer_rn,
        outer_event=delta_outer_rn >= profile.h(r_n),
        rn_bound_ok=r_n <= n + 2 * h_n,
        wave_size_ok=threshold >= r_n + profile.h(r_n),
        final_size=len(cluster),
        telescope_widths=profile.telescope_widths(n),
    )
    log.debug("tentacle n=%d: X_n=%d protrudes=%s cov=%d", n, x_n, report.protrudes, len(cov_sites))
    return report


# ---------------------------
# Deep holes
# ---------------------------

@dataclass
class DeepHoleTrialRecord:
    k: int
    R_k: int
    X_k: int
    lambda_k: float
    Z_k: Site
    zk_norm: float
    event_A: bool
    event_C: bool
    event_I: bool
    event_outer: bool
    prev_event_A: bool
    bound_ok: bool
    cap_hits: int
    complement_hits: int
    cluster_size: int


def deep_hole_waves(n: int, profile: ScalingProfile) -> int:
    """N = ⌊n / (2h(n))⌋."""
    h_n = profile.h(n)
    if h_n <= 0:
        raise DomainError("deep-hole waves need h(n) > 0 (alpha > 0)")
    return int(math.floor(n / (2 * h_n)))


def deep_hole_experiment(
    n: int,
    profile: ScalingProfile,
    randomness: RngStream,
    dim: int = 2,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> List[DeepHoleTrialRecord]:
    if n < 10:
        raise DomainError(f"deep-hole experiment needs n >= 10, got {n}")
    if profile.beta < profile.alpha:
        raise DomainError(f"deep-hole experiment needs beta >= alpha, got {profile.beta} < {profile.alpha}")
    waves = deep_hole_waves(n, profile)
    h = profile.h

    b = ball_count(dim, n)
    cluster = grow_from_origin(dim, b, randomness, extent=3 * n + 1, config=config)
    total = b
    r_prev = rho(dim, total)
    prev_a = inner_error(cluster, r_prev) > h(r_prev)
    poisson_stream = randomness.fork()
    continuation = randomness.fork()

    records: List[DeepHoleTrialRecord] = []
    for k in range(1, waves + 1):
        lam = shell_count(dim, r_prev, r_prev + 2 * h(r_prev))
        x_k = poisson_sample(lam, poisson_stream)
        total += x_k
        r_k = rho(dim, total)

        z_k = cluster.min_unoccupied_site()
        zn = norm(z_k)
        bound_ok = r_prev - h(r_prev) - 1e-9 <= zn <= r_prev + 1 + 1e-9

        cap_radius = profile.Lbar(r_k)
        if cap_radius > 0:
            cap, _complement = cap_and_complement(z_k, cap_radius)
        else:
            cap = frozenset()

        green = wave_run(cluster, ParticleConfig.point(origin(dim), x_k), zn, randomness,
                         track_free_exits=False, config=config)
        escape2 = strict_limit(zn + 7 * profile.Lbar(r_prev))
        hits = release_tracking_hits(cluster, green.stopped, z_k, escape2, randomness, continuation, config)
        cap_hits = sum(c for s, c in hits.items() if s in cap)
        complement_hits = sum(c for s, c in hits.items() if s not in cap)
        if len(cluster) != total:
            raise IdlaError(f"particle conservation broken at wave {k}: {len(cluster)} != {total}")

        event_a = inner_error(cluster, r_k) > h(r_k)
        rec = DeepHoleTrialRecord(
            k=k,
            R_k=r_k,
            X_k=x_k,
            lambda_k=float(lam),
            Z_k=z_k,
            zk_norm=zn,
            event_A=event_a,
            event_C=(2.0 / 3.0) * lam <= x_k <= 2 * lam,
            event_I=cap_hits == 0 and complement_hits == 0,
            event_outer=outer_error(cluster, r_k) >= profile.Lbar(r_k),
            prev_event_A=prev_a,
            bound_ok=bound_ok,
            cap_hits=cap_hits,
            complement_hits=complement_hits,
            cluster_size=len(cluster),
        )
        records.append(rec)
        log.debug("deep-hole wave %d/%d: R_k=%d X_k=%d A=%s C=%s I=%s",
                  k, waves, r_k, x_k, rec.event_A, rec.event_C, rec.event_I)
        prev_a = event_a
        r_prev = r_k
    return records


def bound_violations(records: Sequence[DeepHoleTrialRecord]) -> int:
    """Z_k norm-bound failures on waves whose predecessor had no deep hole."""
    return sum(1 for r in records if not r.prev_event_A and not r.bound_ok)


# ---------------------------
# Scaling fit
# ---------------------------

def scaling_fit(records: Sequence[ErrorRecord], model: str = "sqrt-log", which: str = "inner") -> Tuple[float, float]:
    """Least-squares slope of mean δ against √log n (or log n)."""
    if model not in ("sqrt-log", "log"):
        raise DomainError(f"unknown scaling model {model!r}")
    if which not in ("inner", "outer"):
        raise DomainError(f"unknown error kind {which!r}")
    by_n: Dict[int, List[float]] = defaultdict(list)
    for r in records:
        by_n[r.n].append(r.delta_inner if which == "inner" else r.delta_outer)
    if len(by_n) < 3:
        raise DomainError(f"scaling fit needs >= 3 distinct radii, got {len(by_n)}")
    ns = sorted(by_n)
    x = np.array([math.sqrt(math.log(n)) if model == "sqrt-log" else math.log(n) for n in ns])
    y = np.array([float(np.mean(by_n[n])) for n in ns])
    fit = stats.linregress(x, y)
    return float(fit.slope), float(fit.stderr)
