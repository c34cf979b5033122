from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import FrozenSet, Iterable, List, Set, Tuple, Union

from cachetools import LRUCache, cached

from idla.errors import CapacityError, DomainError

Site = Tuple[int, ...]
Real = Union[int, float, Fraction]

MAX_COUNT = 2 ** 63 - 1


# ---------------------------
# Sites
# ---------------------------

def make_site(coords: Iterable[int]) -> Site:
    site = tuple(int(c) for c in coords)
    if len(site) < 2:
        raise DomainError(f"lattice dimension must be >= 2, got {len(site)}")
    return site


def origin(dim: int) -> Site:
    check_dim(dim)
    return (0,) * dim


def axis_site(dim: int, k: int, axis: int = 0) -> Site:
    coords = [0] * dim
    coords[axis] = int(k)
    return tuple(coords)


def check_dim(dim: int) -> None:
    if int(dim) != dim or dim < 2:
        raise DomainError(f"lattice dimension must be an integer >= 2, got {dim!r}")


def norm2(site: Site) -> int:
    return sum(c * c for c in site)


def norm(site: Site) -> float:
    return math.sqrt(norm2(site))


def diff2(a: Site, b: Site) -> int:
    return sum((x - y) * (x - y) for x, y in zip(a, b))


def move(site: Site, direction: int) -> Site:
    """Direction k moves along axis k // 2, forward for even k."""
    axis = direction >> 1
    step = -1 if direction & 1 else 1
    return site[:axis] + (site[axis] + step,) + site[axis + 1:]


def neighbors(site: Site) -> List[Site]:
    return [move(site, k) for k in range(2 * len(site))]


# ---------------------------
# Exact radius handling
# ---------------------------

def _as_fraction(r: Real) -> Fraction:
    if isinstance(r, float) and not math.isfinite(r):
        raise DomainError(f"radius must be finite, got {r!r}")
    return Fraction(r)


def _square(r: Real) -> Fraction:
    fr = _as_fraction(r)
    r2 = fr * fr
    if isinstance(r, float):
        # only the correctly rounded √k snaps to k
        k = round(r2)
        if k >= 0 and math.sqrt(k) == r:
            return Fraction(k)
    return r2


def strict_limit(r: Real) -> int:
    """Largest integer norm² strictly inside radius r (‖y‖ < r), -1 if none."""
    if r < 0:
        raise DomainError(f"radius must be >= 0, got {r!r}")
    return math.ceil(_square(r)) - 1


def lower_limit(r: Real) -> int:
    """Smallest integer norm² with ‖y‖ >= r."""
    if r <= 0:
        return 0
    return math.ceil(_square(r))


def within(y: Site, center: Site, r: Real) -> bool:
    return diff2(y, center) <= strict_limit(r)


# ---------------------------
# Balls and shells
# ---------------------------

@dataclass(frozen=True)
class BallSpec:
    center: Site
    radius: Real

    def contains(self, y: Site) -> bool:
        return within(y, self.center, self.radius)

    def sites(self) -> List[Site]:
        return [tuple(c + o for c, o in zip(self.center, y)) for y in ball_sites(len(self.center), self.radius)]


@dataclass(frozen=True)
class ShellSpec:
    center: Site
    inner_radius: Real
    outer_radius: Real

    def __post_init__(self):
        if self.inner_radius > self.outer_radius:
            raise DomainError(
                f"shell inner radius {self.inner_radius} exceeds outer radius {self.outer_radius}"
            )

    def contains(self, y: Site) -> bool:
        d2 = diff2(y, self.center)
        return lower_limit(self.inner_radius) <= d2 <= strict_limit(self.outer_radius)


def _enumerate_le(dim: int, limit: int) -> List[Site]:
    if limit < 0:
        return []
    s = math.isqrt(limit)
    if dim == 1:
        return [(x,) for x in range(-s, s + 1)]
    out: List[Site] = []
    for x in range(-s, s + 1):
        for tail in _enumerate_le(dim - 1, limit - x * x):
            out.append((x,) + tail)
    return out


def sites_within_norm2(dim: int, limit2: int) -> List[Site]:
    """Sites with norm² <= limit2, lexicographic."""
    check_dim(dim)
    return _enumerate_le(dim, limit2)


def sites_with_norm2(dim: int, k: int) -> List[Site]:
    return [y for y in sites_within_norm2(dim, k) if norm2(y) == k]


def ball_sites(dim: int, r: Real) -> List[Site]:
    """Sites of 𝔹(0,r) in lexicographic order."""
    check_dim(dim)
    return _enumerate_le(dim, strict_limit(r))


def sites_by_norm(dim: int, r: Real) -> List[Site]:
    """Sites of 𝔹(0,r) ordered by (norm², coords)."""
    return sorted(ball_sites(dim, r), key=lambda y: (norm2(y), y))


def shell_sites(shell: ShellSpec) -> List[Site]:
    dim = len(shell.center)
    lo = lower_limit(shell.inner_radius)
    out = []
    for y in _enumerate_le(dim, strict_limit(shell.outer_radius)):
        if norm2(y) >= lo:
            out.append(tuple(c + o for c, o in zip(shell.center, y)))
    return out


# ---------------------------
# Volumes
# ---------------------------

_count_lock = threading.Lock()


@cached(cache=LRUCache(maxsize=200_000), lock=_count_lock)
def _count_le(dim: int, limit: int) -> int:
    # number of y in Z^dim with norm² <= limit
    if limit < 0:
        return 0
    s = math.isqrt(limit)
    if dim == 1:
        return 2 * s + 1
    total = _count_le(dim - 1, limit)
    for x in range(1, s + 1):
        total += 2 * _count_le(dim - 1, limit - x * x)
    return total


def ball_count(dim: int, r: Real) -> int:
    """b(r) = |{y : ‖y‖ < r}|, exact."""
    check_dim(dim)
    count = _count_le(dim, strict_limit(r))
    if count > MAX_COUNT:
        raise CapacityError(f"ball count for dim={dim}, r={r} exceeds {MAX_COUNT}")
    return count


def shell_count(dim: int, inner: Real, outer: Real) -> int:
    """|𝔹(0,outer) \\ 𝔹(0,inner)|."""
    return ball_count(dim, outer) - ball_count(dim, min(inner, outer))


def rho(dim: int, gamma: Real) -> int:
    """Radius of the largest integer ball whose volume is <= gamma."""
    check_dim(dim)
    g = _as_fraction(gamma)
    if g < 0:
        raise DomainError(f"gamma must be >= 0, got {gamma!r}")
    hi = 1
    while ball_count(dim, hi) <= g:
        hi *= 2
    lo = hi // 2  # ball_count(lo) <= g (lo == 0 trivially)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ball_count(dim, mid) <= g:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------
# Boundaries
# ---------------------------

def outer_boundary(sites: Iterable[Site]) -> Set[Site]:
    occupied = sites if isinstance(sites, (set, frozenset)) else set(sites)
    out: Set[Site] = set()
    for x in occupied:
        for y in neighbors(x):
            if y not in occupied:
                out.add(y)
    return out


_shell_lock = threading.Lock()


@cached(cache=LRUCache(maxsize=512), lock=_shell_lock)
def _sphere_shell(dim: int, n2: int) -> FrozenSet[Site]:
    out: Set[Site] = set()
    for x in _enumerate_le(dim, n2 - 1):
        for y in neighbors(x):
            if norm2(y) >= n2:
                out.add(y)
    return frozenset(out)


def sphere_shell(z: Site) -> FrozenSet[Site]:
    """Σ(z): outer boundary of 𝔹(0,‖z‖); always contains z."""
    n2 = norm2(z)
    if n2 == 0:
        raise DomainError("sphere shell is undefined at the origin")
    return _sphere_shell(len(z), n2)


def cap_and_complement(z: Site, R: Real) -> Tuple[FrozenSet[Site], FrozenSet[Site]]:
    if R <= 0:
        raise DomainError(f"cap radius must be > 0, got {R!r}")
    shell = sphere_shell(z)
    limit = strict_limit(R)
    cap = frozenset(y for y in shell if diff2(y, z) <= limit)
    return cap, shell - cap
