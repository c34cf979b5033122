from __future__ import annotations

import csv
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Mapping, Union

import numpy as np
import sympy
from scipy import linalg

from idla.aggregation import grow_from_origin
from idla.errors import CapacityError, DomainError, NumericError
from idla.lattice import Site, check_dim, neighbors, origin, outer_boundary
from idla.walks import RngStream

log = logging.getLogger(__name__)

Probability = Union[Fraction, float]
Shape = FrozenSet[Site]

MAX_SOLVE_SIZE = 1000
MAX_EXACT_PARTICLES = 5


# ---------------------------
# Settling distribution
# ---------------------------

def _system(sites: list, boundary: list, dim: int):
    """(I − P) restricted to the cluster and the one-step exit matrix B."""
    index = {x: i for i, x in enumerate(sites)}
    bindex = {y: j for j, y in enumerate(boundary)}
    n, m = len(sites), len(boundary)
    A = [[Fraction(0)] * n for _ in range(n)]
    B = [[Fraction(0)] * m for _ in range(n)]
    w = Fraction(1, 2 * dim)
    for x, i in index.items():
        A[i][i] += 1
        for y in neighbors(x):
            if y in index:
                A[i][index[y]] -= w
            else:
                B[i][bindex[y]] += w
    return A, B


def _solve_exact(A, e) -> list:
    M = sympy.Matrix([[sympy.Rational(v.numerator, v.denominator) for v in row] for row in A])
    rhs = sympy.Matrix([sympy.Rational(v.numerator, v.denominator) for v in e])
    try:
        g = M.T.LUsolve(rhs)
    except ValueError as exc:
        raise NumericError(f"singular absorption system: {exc}") from exc
    return [Fraction(int(v.p), int(v.q)) for v in g]


def _solve_float(A, e, residual_tol: float) -> np.ndarray:
    M = np.array([[float(v) for v in row] for row in A]).T
    b = np.array([float(v) for v in e])
    try:
        g = linalg.solve(M, b)
    except linalg.LinAlgError as exc:
        raise NumericError(f"singular absorption system: {exc}") from exc
    residual = float(np.max(np.abs(M @ g - b)))
    if residual > residual_tol:
        raise NumericError(f"absorption solve residual {residual:.3g} exceeds {residual_tol:.3g}")
    return g


def settle_distribution_exact(
    cluster: Iterable[Site],
    start: Site,
    exact_limit: int = 20,
    residual_tol: float = 1e-10,
) -> Dict[Site, Probability]:
    """
    Exit law on outer_boundary(cluster) of the walk from start. Solves
    (I − P)ᵀ g = e_start for the Green row g and returns gᵀB.
    """
    occupied = frozenset(cluster)
    if start not in occupied:
        return {start: Fraction(1)}
    if len(occupied) > MAX_SOLVE_SIZE:
        raise CapacityError(f"absorption solve supports at most {MAX_SOLVE_SIZE} sites, got {len(occupied)}")
    dim = len(start)
    check_dim(dim)
    sites = sorted(occupied)
    boundary = sorted(outer_boundary(occupied))
    A, B = _system(sites, boundary, dim)
    e = [Fraction(0)] * len(sites)
    e[sites.index(start)] = Fraction(1)

    if len(sites) <= exact_limit:
        g = _solve_exact(A, e)
        dist: Dict[Site, Probability] = {}
        for j, y in enumerate(boundary):
            p = sum((g[i] * B[i][j] for i in range(len(sites)) if B[i][j]), Fraction(0))
            if p:
                dist[y] = p
        if sum(dist.values()) != 1:
            raise NumericError("exact exit distribution does not sum to 1")
        return dist

    g = _solve_float(A, e, residual_tol)
    Bf = np.array([[float(v) for v in row] for row in B])
    probs = g @ Bf
    total = float(probs.sum())
    if abs(total - 1.0) > residual_tol:
        raise NumericError(f"exit distribution sums to {total!r}")
    return {y: float(p) for y, p in zip(boundary, probs) if p > 0}


# ---------------------------
# Shape distributions
# ---------------------------

def _connected(shape: Shape) -> bool:
    if not shape:
        return True
    first = next(iter(shape))
    seen = {first}
    queue = deque([first])
    while queue:
        x = queue.popleft()
        for y in neighbors(x):
            if y in shape and y not in seen:
                seen.add(y)
                queue.append(y)
    return len(seen) == len(shape)


@dataclass
class ShapeDistribution:
    dim: int
    probabilities: Dict[Shape, Probability] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.probabilities)

    def __getitem__(self, shape: Iterable[Site]) -> Probability:
        return self.probabilities.get(frozenset(shape), 0)

    def total(self) -> Probability:
        return sum(self.probabilities.values())

    def marginal(self, site: Site) -> Probability:
        """P(site occupied)."""
        return sum((p for s, p in self.probabilities.items() if site in s), 0)

    def validate(self, tol: float = 1e-10) -> None:
        if abs(float(self.total()) - 1.0) > tol:
            raise NumericError(f"shape probabilities sum to {float(self.total())!r}")
        o = origin(self.dim)
        for shape in self.probabilities:
            if shape and o not in shape:
                raise DomainError(f"shape {sorted(shape)} does not contain the origin")
            if not _connected(shape):
                raise DomainError(f"shape {sorted(shape)} is not connected")


def cluster_distribution_exact(k: int, dim: int, exact_limit: int = 20,
                               residual_tol: float = 1e-10) -> ShapeDistribution:
    """Law of the occupied set after k explorers from the origin."""
    check_dim(dim)
    if k < 0:
        raise DomainError(f"particle count must be >= 0, got {k}")
    if k > MAX_EXACT_PARTICLES:
        raise CapacityError(f"exact shape distributions support k <= {MAX_EXACT_PARTICLES}, got {k}")
    o = origin(dim)
    level: Dict[Shape, Probability] = {frozenset(): Fraction(1)}
    for step in range(k):
        nxt: Dict[Shape, Probability] = {}
        for shape, p in level.items():
            for y, q in settle_distribution_exact(shape, o, exact_limit, residual_tol).items():
                grown = shape | {y}
                nxt[grown] = nxt.get(grown, 0) + p * q
        level = nxt
        log.debug("exact oracle d=%d: %d shapes after %d explorers", dim, len(level), step + 1)
    dist = ShapeDistribution(dim, level)
    dist.validate(residual_tol)
    return dist


def tv_distance(p: ShapeDistribution | Mapping[Shape, Probability],
                q: ShapeDistribution | Mapping[Shape, Probability]) -> float:
    pp = p.probabilities if isinstance(p, ShapeDistribution) else p
    qq = q.probabilities if isinstance(q, ShapeDistribution) else q
    keys = set(pp) | set(qq)
    return 0.5 * sum(abs(float(pp.get(s, 0)) - float(qq.get(s, 0))) for s in keys)


def empirical_shape_distribution(k: int, dim: int, samples: int, randomness: RngStream) -> ShapeDistribution:
    if samples <= 0:
        raise DomainError(f"samples must be >= 1, got {samples}")
    freq: Counter = Counter()
    for _ in range(samples):
        freq[frozenset(grow_from_origin(dim, k, randomness).sites())] += 1
    return ShapeDistribution(dim, {s: c / samples for s, c in freq.items()})


# ---------------------------
# Export
# ---------------------------

def shape_key(shape: Iterable[Site]) -> str:
    """Sorted site list, e.g. "0,0;1,0"."""
    return ";".join(",".join(str(c) for c in site) for site in sorted(shape))


def parse_shape_key(text: str) -> Shape:
    if not text:
        return frozenset()
    return frozenset(tuple(int(c) for c in part.split(",")) for part in text.split(";"))


def export_distribution_csv(dist: ShapeDistribution, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(dist.probabilities.items(), key=lambda kv: sorted(kv[0]))
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["shape", "probability"])
        for shape, p in rows:
            w.writerow([shape_key(shape), format(float(p), ".17g")])
    return path
