from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from idla.aggregation import ParticleConfig
from idla.errors import DomainError, InsufficientResolution
from idla.lattice import Site, cap_and_complement, diff2, norm, norm2, origin, sphere_shell, strict_limit
from idla.walks import RngStream, WalkConfig, batch_exit_ball, batch_hit_or_exit

log = logging.getLogger(__name__)


@dataclass
class HarmonicConfig:
    # H(z) < ∞ is declared missed beyond escape_factor × distance
    escape_factor: float = 100.0
    # joint-zero cap depth ∞ is truncated at cap_escape_factor × ‖z‖
    cap_escape_factor: float = 8.0
    # walkers per vectorized batch
    batch_size: int = 200_000
    walk: WalkConfig = field(default_factory=WalkConfig)


DEFAULT_HARMONIC_CONFIG = HarmonicConfig()


@dataclass
class Estimate:
    value: float
    stderr: float
    replicas: int
    bias_bound: float = 0.0


def _binomial_estimate(hits: int, replicas: int, bias_bound: float = 0.0) -> Estimate:
    p = hits / replicas
    return Estimate(p, math.sqrt(p * (1.0 - p) / replicas), replicas, bias_bound)


@dataclass
class BoundFit:
    name: str
    fitted_constant: float
    sample_size: int
    confidence_band: Tuple[float, float]
    r_squared: float = float("nan")
    points: List[Dict[str, float]] = field(default_factory=list)


# ---------------------------
# N_z samples
# ---------------------------

def _outer_radius(z: Site, depth: float, escape_radius: Optional[float], config: HarmonicConfig) -> float:
    if depth <= 0:
        raise DomainError(f"depth must be > 0 or infinite, got {depth}")
    if math.isinf(depth):
        if escape_radius is not None:
            return escape_radius
        if len(z) == 2:
            raise DomainError("infinite depth in d=2 needs an explicit escape radius (the walk is recurrent)")
        return config.escape_factor * norm(z)
    return norm(z) + depth


@dataclass
class NzSample:
    """Per-walk first Σ(z)-hits and whether z was then hit within the depth."""

    z: Site
    exits: List[Site]
    hits: np.ndarray

    def count(self, region: Collection[Site]) -> int:
        return int(sum(1 for y, hit in zip(self.exits, self.hits) if hit and y in region))


def nz_sample(
    eta: ParticleConfig,
    z: Site,
    depth: float,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> NzSample:
    if norm2(z) == 0:
        raise DomainError("N_z is undefined for z at the origin")
    outer = _outer_radius(z, depth, escape_radius, config)
    starts = list(eta.launches())
    if not starts:
        return NzSample(z, [], np.zeros(0, dtype=bool))
    exits = batch_exit_ball(starts, norm2(z) - 1, randomness, config=config.walk)
    hits = batch_hit_or_exit(exits, z, origin(len(z)), strict_limit(outer), randomness, config=config.walk)
    return NzSample(z, [tuple(int(c) for c in row) for row in exits.tolist()], hits)


def count_Nz(
    eta: ParticleConfig,
    z: Site,
    region: Collection[Site],
    depth: float,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> int:
    """Walks from η whose first Σ(z)-hit lies in region and that then visit z
    before leaving 𝔹(0, ‖z‖ + depth)."""
    region = frozenset(region)
    if not region <= sphere_shell(z):
        raise DomainError("region must be a subset of the sphere shell Σ(z)")
    _outer_radius(z, depth, escape_radius, config)
    if not region:
        return 0
    return nz_sample(eta, z, depth, randomness, escape_radius, config).count(region)


@dataclass(frozen=True)
class HarmonicCount:
    """N_z(η, Λ, h) observed on one sample of walks."""

    z: Site
    region: frozenset
    depth: float
    count: int
    walkers: int

    def __post_init__(self):
        if not self.region <= sphere_shell(self.z):
            raise DomainError("region must be a subset of the sphere shell Σ(z)")


def coupled_counts(
    eta: ParticleConfig,
    z: Site,
    regions: Sequence[Collection[Site]],
    depth: float,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> List[HarmonicCount]:
    """N_z for several regions read off the same walks."""
    sample = nz_sample(eta, z, depth, randomness, escape_radius, config)
    return [HarmonicCount(z, frozenset(r), depth, sample.count(r), eta.total) for r in regions]


def exit_distribution(z: Site, replicas: int, randomness: RngStream,
                      config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG) -> Dict[Site, float]:
    """Empirical law of the first Σ(z)-hit from the origin."""
    exits = batch_exit_ball([origin(len(z))] * replicas, norm2(z) - 1, randomness, config=config.walk)
    freq = Counter(tuple(int(c) for c in row) for row in exits.tolist())
    return {y: c / replicas for y, c in freq.items()}


def expected_Nz_two_factor(
    total: int,
    z: Site,
    region: Collection[Site],
    depth: float,
    replicas: int,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> Estimate:
    """
    E[N_z(total·δ0, Λ, h)] as total · Σ_y P0(first Σ-hit = y) · P_y(z before exit),
    the two factors estimated from independent samples.
    """
    outer = _outer_radius(z, depth, escape_radius, config)
    limit2 = strict_limit(outer)
    harmonic = exit_distribution(z, replicas, randomness.spawn(1), config)
    hit_stream = randomness.spawn(2)
    value = 0.0
    var = 0.0
    for y in sorted(set(region) & set(harmonic)):
        p_y = harmonic[y]
        hits = batch_hit_or_exit([y] * replicas, z, origin(len(z)), limit2, hit_stream, config=config.walk)
        q_y = float(hits.mean())
        value += p_y * q_y
        var += (q_y ** 2) * p_y * (1 - p_y) / replicas + (p_y ** 2) * q_y * (1 - q_y) / replicas
    return Estimate(total * value, total * math.sqrt(var), replicas)


# ---------------------------
# Poisson thinning
# ---------------------------

@dataclass
class SplitReport:
    replicas: int
    mean_a: float
    mean_b: float
    stderr_a: float
    stderr_b: float
    dispersion_a: float
    dispersion_b: float
    dispersion_p_a: float
    dispersion_p_b: float
    independence_chi2: float
    independence_p: float
    degenerate: bool


def reflection_halves(z: Site, axis: int = 1) -> Tuple[frozenset, frozenset]:
    """Σ(z) sites with positive / negative coordinate on the given axis."""
    shell = sphere_shell(z)
    return (frozenset(y for y in shell if y[axis] > 0), frozenset(y for y in shell if y[axis] < 0))


def _pooled_counts(
    lam: float,
    z: Site,
    regions: Sequence[Tuple[frozenset, float]],
    replicas: int,
    randomness: RngStream,
    config: HarmonicConfig,
) -> np.ndarray:
    """
    counts[r, i] = N_z(X_r δ0, Λ_i, h_i) with X_r ~ Poisson(λ), every replica
    pooled into one vectorized batch.
    """
    dim = len(z)
    counts = np.zeros((replicas, len(regions)), dtype=np.int64)
    if lam <= 0 or replicas == 0:
        return counts
    sizes = randomness.generator.poisson(lam, size=replicas)
    labels = np.repeat(np.arange(replicas), sizes)
    for lo in range(0, labels.size, config.batch_size):
        lab = labels[lo:lo + config.batch_size]
        starts = np.zeros((lab.size, dim), dtype=np.int64)
        exits = batch_exit_ball(starts, norm2(z) - 1, randomness, config=config.walk)
        exit_sites = [tuple(row) for row in exits.tolist()]
        for i, (region, outer) in enumerate(regions):
            mask = np.fromiter((y in region for y in exit_sites), dtype=bool, count=len(exit_sites))
            if not mask.any():
                continue
            hits = batch_hit_or_exit(exits[mask], z, origin(dim), strict_limit(outer), randomness, config=config.walk)
            counts[:, i] += np.bincount(lab[mask][hits], minlength=replicas)
    return counts


def _dispersion(x: np.ndarray) -> Tuple[float, float]:
    """Index of dispersion and its two-sided chi-square p-value."""
    n = x.size
    mean = float(x.mean())
    if mean == 0 or n < 2:
        return float("nan"), float("nan")
    index = float(x.var(ddof=1)) / mean
    statistic = (n - 1) * index
    p = 2 * min(stats.chi2.cdf(statistic, n - 1), stats.chi2.sf(statistic, n - 1))
    return index, float(p)


def _categories(x: np.ndarray) -> np.ndarray:
    cuts = np.unique(np.quantile(x, [0.2, 0.4, 0.6, 0.8]))
    return np.searchsorted(cuts, x, side="right")


def _independence(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    ca, cb = _categories(a), _categories(b)
    table = np.zeros((ca.max() + 1, cb.max() + 1))
    np.add.at(table, (ca, cb), 1)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return float("nan"), float("nan")
    chi2, p, _dof, _expected = stats.chi2_contingency(table)
    return float(chi2), float(p)


def poisson_split_test(
    lam: float,
    z: Site,
    partition: Tuple[Collection[Site], Collection[Site]],
    depths: Tuple[float, float],
    replicas: int,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> SplitReport:
    region_a, region_b = frozenset(partition[0]), frozenset(partition[1])
    if region_a & region_b:
        raise DomainError("partition regions must be disjoint")
    outer_a = _outer_radius(z, depths[0], escape_radius, config)
    outer_b = _outer_radius(z, depths[1], escape_radius, config)
    counts = _pooled_counts(lam, z, [(region_a, outer_a), (region_b, outer_b)], replicas, randomness, config)
    a, b = counts[:, 0], counts[:, 1]
    degenerate = bool(a.sum() == 0 or b.sum() == 0)
    disp_a, p_a = _dispersion(a)
    disp_b, p_b = _dispersion(b)
    chi2, p_ind = (float("nan"), float("nan")) if degenerate else _independence(a, b)
    root = math.sqrt(max(replicas, 1))
    return SplitReport(
        replicas=replicas,
        mean_a=float(a.mean()) if replicas else 0.0,
        mean_b=float(b.mean()) if replicas else 0.0,
        stderr_a=float(a.std(ddof=1)) / root if replicas > 1 else 0.0,
        stderr_b=float(b.std(ddof=1)) / root if replicas > 1 else 0.0,
        dispersion_a=disp_a,
        dispersion_b=disp_b,
        dispersion_p_a=p_a,
        dispersion_p_b=p_b,
        independence_chi2=chi2,
        independence_p=p_ind,
        degenerate=degenerate,
    )


# ---------------------------
# Joint-zero decay
# ---------------------------

def _cap_outer_radius(z: Site, escape_radius: Optional[float], config: HarmonicConfig) -> float:
    if escape_radius is not None or len(z) == 2:
        return _outer_radius(z, math.inf, escape_radius, config)
    if config.cap_escape_factor <= 1:
        raise DomainError(f"cap_escape_factor must be > 1, got {config.cap_escape_factor}")
    return config.cap_escape_factor * norm(z)


def joint_zero_frequency(
    lam: float,
    z: Site,
    R: float,
    replicas: int,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> Estimate:
    """P(N_z(Λ,∞) = 0, N_z(Λ',R) = 0) at one λ, with Λ = 𝔹(z,R) ∩ Σ(z)."""
    if R <= 0:
        raise DomainError(f"cap radius must be > 0, got {R}")
    if replicas <= 0:
        raise DomainError("replicas must be >= 1")
    if lam <= 0:
        return Estimate(1.0, 0.0, replicas)
    cap, complement = cap_and_complement(z, R)
    outer_cap = _cap_outer_radius(z, escape_radius, config)
    outer_rest = _outer_radius(z, R, None, config)
    counts = _pooled_counts(lam, z, [(cap, outer_cap), (complement, outer_rest)], replicas, randomness, config)
    zero = int(((counts[:, 0] == 0) & (counts[:, 1] == 0)).sum())
    log.debug("joint-zero λ=%s: P=%s (cap depth cut at %s)", lam, zero / replicas, outer_cap)
    gap = outer_cap - norm(z)
    bias = min(1.0, (norm(z) / gap) ** (len(z) - 2)) if gap > 0 else 1.0
    return _binomial_estimate(zero, replicas, bias)


def joint_zero_scale(z: Site, R: float) -> float:
    """R / ‖z‖^{d−1}, the regressor per unit λ."""
    return R / norm(z) ** (len(z) - 1)


def fit_joint_zero(lambdas: Sequence[float], estimates: Sequence[Estimate], z: Site, R: float) -> BoundFit:
    """Fits −log P = κ·λR/‖z‖^{d−1} through the origin."""
    scale = joint_zero_scale(z, R)
    points = [
        {"lambda": float(lam), "x": float(lam) * scale, "p_zero": est.value, "stderr": est.stderr}
        for lam, est in zip(lambdas, estimates)
    ]
    informative = [pt for pt in points if pt["x"] > 0]
    if not informative or all(pt["p_zero"] in (0.0, 1.0) for pt in informative):
        raise InsufficientResolution(
            "zero-probabilities are all 0 or all 1 on this grid; "
            "raise replicas, spread the λ grid or change R/‖z‖"
        )
    usable = [pt for pt in informative if pt["p_zero"] > 0]
    if len(usable) < 2:
        raise InsufficientResolution("fewer than two grid points with P > 0; lower the λ grid")
    x = np.array([pt["x"] for pt in usable])
    y = np.array([-math.log(pt["p_zero"]) for pt in usable])
    kappa = float((x @ y) / (x @ x))
    if kappa <= 0:
        raise InsufficientResolution(f"fitted decay constant {kappa} is not positive")
    resid = y - kappa * x
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    se = math.sqrt(ss_res / (len(x) - 1) / float(x @ x))
    size = sum(est.replicas for est in estimates)
    return BoundFit("joint-zero", kappa, size, (kappa - 1.96 * se, kappa + 1.96 * se), r2, points)


def joint_zero_probe(
    lambda_grid: Sequence[float],
    z: Site,
    R: float,
    replicas: int,
    randomness: RngStream,
    escape_radius: Optional[float] = None,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> BoundFit:
    estimates = [
        joint_zero_frequency(lam, z, R, replicas, randomness.spawn(i), escape_radius, config)
        for i, lam in enumerate(lambda_grid)
    ]
    return fit_joint_zero(lambda_grid, estimates, z, R)


# ---------------------------
# Hitting probabilities
# ---------------------------

def _chunks(total: int, size: int):
    done = 0
    while done < total:
        k = min(size, total - done)
        yield k
        done += k


def hit_prob_far(
    y: Site,
    z: Site,
    escape_factor: float,
    replicas: int,
    randomness: RngStream,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> Estimate:
    """P_y(H(z) < ∞), escape declared at escape_factor·‖y−z‖ around z."""
    dim = len(z)
    if dim < 3:
        raise DomainError("H(z) < ∞ has probability 1 in d=2; use hit_before_exit")
    if escape_factor < 10:
        raise DomainError(f"escape_factor must be >= 10, got {escape_factor}")
    if replicas <= 0:
        raise DomainError("replicas must be >= 1")
    if y == z:
        return Estimate(1.0, 0.0, replicas)
    bias = (1.0 / escape_factor) ** (dim - 2)
    limit2 = strict_limit(escape_factor * math.sqrt(diff2(y, z)))
    hits = 0
    for k in _chunks(replicas, config.batch_size):
        hits += int(batch_hit_or_exit([y] * k, z, z, limit2, randomness, config=config.walk).sum())
    return _binomial_estimate(hits, replicas, bias)


def hit_before_exit(
    y: Site,
    z: Site,
    depth: float,
    replicas: int,
    randomness: RngStream,
    config: HarmonicConfig = DEFAULT_HARMONIC_CONFIG,
) -> Estimate:
    """P_y(H(z) < H(𝔹ᶜ(0, ‖z‖ + depth)))."""
    if depth <= 0:
        raise DomainError(f"depth must be > 0, got {depth}")
    if replicas <= 0:
        raise DomainError("replicas must be >= 1")
    if y == z:
        return Estimate(1.0, 0.0, replicas)
    limit2 = strict_limit(norm(z) + depth)
    if norm2(y) > limit2:
        return Estimate(0.0, 0.0, replicas)
    hits = 0
    for k in _chunks(replicas, config.batch_size):
        hits += int(batch_hit_or_exit([y] * k, z, origin(len(z)), limit2, randomness, config=config.walk).sum())
    return _binomial_estimate(hits, replicas)


# ---------------------------
# Hitting-bound constants
# ---------------------------

def _upper_constant(name: str, ratios: Sequence[float], stderrs: Sequence[float], size: int,
                    points: List[Dict[str, float]]) -> BoundFit:
    if not ratios or max(ratios) <= 0:
        raise InsufficientResolution(f"{name}: every estimate is 0; raise replicas or move closer")
    c = max(ratios)
    lo = max(r - 1.96 * s for r, s in zip(ratios, stderrs))
    hi = max(r + 1.96 * s for r, s in zip(ratios, stderrs))
    return BoundFit(name, c, size, (lo, hi), points=points)


def fit_green_constant(distances: Sequence[float], estimates: Sequence[Estimate], dim: int) -> BoundFit:
    """Smallest c with P_y(H(z) < ∞) ≤ c / (1 + ‖y−z‖^{d−2}) on the sampled points."""
    scale = [1.0 + float(r) ** (dim - 2) for r in distances]
    points = [{"distance": float(r), "estimate": e.value, "stderr": e.stderr}
              for r, e in zip(distances, estimates)]
    return _upper_constant(
        "green",
        [e.value * s for e, s in zip(estimates, scale)],
        [e.stderr * s for e, s in zip(estimates, scale)],
        sum(e.replicas for e in estimates),
        points,
    )


def fit_exit_constant(distances: Sequence[float], estimates: Sequence[Estimate], depth: float, dim: int) -> BoundFit:
    """Smallest c' with P_y(H(z) < exit) ≤ c'·depth² / ‖z−y‖^d on the sampled points."""
    pairs = [(float(r), e) for r, e in zip(distances, estimates) if r > 0]
    scale = [r ** dim / depth ** 2 for r, _ in pairs]
    points = [{"distance": r, "estimate": e.value, "stderr": e.stderr} for r, e in pairs]
    return _upper_constant(
        "exit",
        [e.value * s for (_, e), s in zip(pairs, scale)],
        [e.stderr * s for (_, e), s in zip(pairs, scale)],
        sum(e.replicas for _, e in pairs),
        points,
    )
