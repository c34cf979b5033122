from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

import numpy as np

from idla import kernels
from idla.errors import DomainError, IdlaError, StepBudgetExceeded
from idla.lattice import Real, Site, check_dim, move, norm2, origin, sites_by_norm, strict_limit
from idla.walks import (
    DEFAULT_WALK_CONFIG,
    InstructionStacks,
    Randomness,
    RngStream,
    WalkConfig,
    WalkState,
    batch_hit_or_exit,
    direction_source,
    drive,
    exit_ball,
    run_until_exit,
)

log = logging.getLogger(__name__)


# ---------------------------
# Occupancy storage
# ---------------------------

class DenseOccupancy:
    """uint8 grid over the box [-extent, extent]^d; sites outside go to a set."""

    def __init__(self, dim: int, extent: int):
        self.dim = dim
        self.extent = int(extent)
        self.side = 2 * self.extent + 1
        self.grid = np.zeros(self.side ** dim, dtype=np.uint8)
        self._overflow: Set[Site] = set()
        self._count = 0

    def index(self, site: Site) -> int:
        i = 0
        E, side = self.extent, self.side
        for c in site:
            c += E
            if c < 0 or c >= side:
                return -1
            i = i * side + c
        return i

    def holds_ball(self, limit2: int) -> bool:
        """True when every site within one step of {norm² <= limit2} is in the box."""
        return self.extent >= math.isqrt(max(limit2, 0)) + 1

    def sites_at(self, flat: np.ndarray) -> List[Site]:
        coords = np.unravel_index(flat, (self.side,) * self.dim)
        return [tuple(int(v) for v in row) for row in zip(*(c - self.extent for c in coords))]

    def __contains__(self, site: Site) -> bool:
        i = self.index(site)
        if i < 0:
            return site in self._overflow
        return self.grid[i] == 1

    def add(self, site: Site) -> None:
        i = self.index(site)
        if i < 0:
            if site not in self._overflow:
                self._overflow.add(site)
                self._count += 1
        elif not self.grid[i]:
            self.grid[i] = 1
            self._count += 1

    def __len__(self) -> int:
        return self._count

    def __iter__(self) -> Iterator[Site]:
        yield from self.sites_at(np.flatnonzero(self.grid))
        yield from self._overflow


class SparseOccupancy(set):
    pass


Occupancy = Union[DenseOccupancy, SparseOccupancy]


# ---------------------------
# Cluster
# ---------------------------

class Cluster:
    """
    Occupied set A(Λ, ξ) with norm bookkeeping. A cluster has one writer;
    grow and wave operations mutate it in place.
    """

    def __init__(self, dim: int, initial: Iterable[Site] = (), extent: Optional[int] = None):
        check_dim(dim)
        self.dim = dim
        self.occupied: Occupancy = DenseOccupancy(dim, extent) if extent is not None else SparseOccupancy()
        self.max_occupied_norm2 = -1
        self.particle_count = 0
        for site in initial:
            self._insert(site)
        self.initial_size = len(self.occupied)
        self._frontier: List[Site] = []
        self._frontier_radius = 0
        self._frontier_pos = 0

    def __contains__(self, site: Site) -> bool:
        return site in self.occupied

    def __len__(self) -> int:
        return len(self.occupied)

    def __iter__(self) -> Iterator[Site]:
        return iter(self.occupied)

    @property
    def max_norm2(self) -> int:
        return max(self.max_occupied_norm2, 0)

    def sites(self) -> Set[Site]:
        return set(self.occupied)

    def _insert(self, site: Site) -> None:
        if len(site) != self.dim:
            raise DomainError(f"site {site} does not have dimension {self.dim}")
        self.occupied.add(site)
        n2 = norm2(site)
        if n2 > self.max_occupied_norm2:
            self.max_occupied_norm2 = n2

    def add(self, site: Site) -> None:
        """Record one settled explorer."""
        if site in self.occupied:
            raise IdlaError(f"site {site} is already occupied")
        self._insert(site)
        self.particle_count += 1

    def min_unoccupied_site(self) -> Site:
        """Unoccupied site of minimal norm, ties broken lexicographically."""
        while True:
            if self._frontier_pos >= len(self._frontier):
                # prefix of the sorted list is stable when the radius grows
                self._frontier_radius = max(4, 2 * self._frontier_radius)
                self._frontier = sites_by_norm(self.dim, self._frontier_radius)
                continue
            site = self._frontier[self._frontier_pos]
            if site not in self.occupied:
                return site
            self._frontier_pos += 1

    @property
    def min_unoccupied_norm2(self) -> int:
        return norm2(self.min_unoccupied_site())


# ---------------------------
# Particle configurations
# ---------------------------

@dataclass
class ParticleConfig:
    counts: Dict[Site, int] = field(default_factory=dict)

    def __post_init__(self):
        bad = {s: c for s, c in self.counts.items() if c < 0 or int(c) != c}
        if bad:
            raise DomainError(f"particle counts must be nonnegative integers: {bad}")
        self.counts = {s: int(c) for s, c in self.counts.items() if c > 0}

    @classmethod
    def point(cls, site: Site, count: int) -> "ParticleConfig":
        return cls({site: count})

    @classmethod
    def from_sites(cls, sites: Iterable[Site]) -> "ParticleConfig":
        return cls(dict(Counter(sites)))

    def add(self, site: Site, count: int = 1) -> None:
        if count > 0:
            self.counts[site] = self.counts.get(site, 0) + count

    @property
    def total(self) -> int:
        """|η|."""
        return sum(self.counts.values())

    def launches(self) -> Iterator[Site]:
        """Sites in lexicographic order, repeats consecutive."""
        for site in sorted(self.counts):
            for _ in range(self.counts[site]):
                yield site

    def support(self) -> List[Site]:
        return sorted(self.counts)


# ---------------------------
# Settling and growth
# ---------------------------

def _budget(cluster: Cluster, start: Site, config: WalkConfig) -> int:
    return config.budget_for_norm2(max(cluster.max_norm2, norm2(start)))


def _stuck(start: Site, pos: Site, steps: int, budget: int, stack_mode: bool = False) -> StepBudgetExceeded:
    return StepBudgetExceeded(
        f"walk from {start} did not leave the cluster after {budget} steps",
        state=WalkState(pos, steps, stack_mode), budget=budget, start=start,
    )


HIT_TARGET = 1
ESCAPED_FIRST = 2


def _track(pos: Site, target: Site, limit2: int, steps: int) -> int:
    """1 on target, 2 beyond limit2 first, 0 undecided. A start on target is a hit."""
    outside = norm2(pos) > limit2
    if pos == target and (steps == 0 or not outside):
        return HIT_TARGET
    return ESCAPED_FIRST if outside else 0


def _settle_free(
    cluster: Cluster,
    start: Site,
    rng: RngStream,
    budget: int,
    target: Optional[Site] = None,
    limit2: int = -1,
) -> Tuple[Site, int]:
    """Compiled settle on a dense cluster; sites outside the box are stepped interpreted."""
    occ = cluster.occupied
    dim = cluster.dim
    x = np.array(start, dtype=np.int64)
    seen = np.zeros(1, dtype=np.uint8)
    if target is None:
        kernel = kernels.settle_walk
        head = (x, occ.grid, occ.extent)
    else:
        kernel = kernels.track_walk
        head = (x, occ.grid, occ.extent, np.asarray(target, dtype=np.int64), limit2, seen)
    steps = 0
    while True:
        status, steps = drive(kernel, rng, dim, head, steps, budget)
        site = tuple(int(c) for c in x)
        if status == kernels.SETTLED:
            return site, int(seen[0])
        if status == kernels.BUDGET:
            raise _stuck(start, site, steps, budget)
        while occ.index(site) < 0:
            if target is not None and seen[0] == 0:
                seen[0] = _track(site, target, limit2, steps)
            if site not in occ:
                return site, int(seen[0])
            if steps >= budget:
                raise _stuck(start, site, steps, budget)
            site = move(site, rng.direction(dim))
            steps += 1
        x[:] = site


def _settle_interpreted(
    cluster: Cluster,
    start: Site,
    randomness: Randomness,
    budget: int,
    target: Site,
    limit2: int,
) -> Tuple[Site, int]:
    occupied = cluster.occupied
    nxt = direction_source(randomness, cluster.dim)
    pos, steps, seen = start, 0, 0
    while True:
        if seen == 0:
            seen = _track(pos, target, limit2, steps)
        if pos not in occupied:
            return pos, seen
        if steps >= budget:
            raise _stuck(start, pos, steps, budget, isinstance(randomness, InstructionStacks))
        pos = move(pos, nxt(pos))
        steps += 1


def _compiled(cluster: Cluster, randomness: Randomness) -> bool:
    return isinstance(randomness, RngStream) and isinstance(cluster.occupied, DenseOccupancy)


def settle(
    cluster: Cluster,
    start: Site,
    randomness: Randomness,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Site:
    """S(τ), τ the first time the walk from start stands outside the cluster."""
    budget = _budget(cluster, start, config)
    if _compiled(cluster, randomness):
        return _settle_free(cluster, start, randomness, budget)[0]
    site, _steps = run_until_exit(
        WalkState(start, stack_mode=isinstance(randomness, InstructionStacks)),
        cluster.occupied,
        randomness,
        budget=budget,
    )
    return site


def grow_from_starts(
    cluster: Cluster,
    starts: Iterable[Site],
    randomness: Randomness,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Cluster:
    for start in starts:
        cluster.add(settle(cluster, start, randomness, config))
    return cluster


def grow_sequential(
    initial: Cluster,
    starts: ParticleConfig,
    randomness: Randomness,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Cluster:
    return grow_from_starts(initial, starts.launches(), randomness, config)


def grow_from_origin(dim: int, count: int, randomness: Randomness, extent: Optional[int] = None,
                     config: WalkConfig = DEFAULT_WALK_CONFIG) -> Cluster:
    cluster = Cluster(dim, extent=extent)
    return grow_sequential(cluster, ParticleConfig.point(origin(dim), count), randomness, config)


def release_tracking_hits(
    cluster: Cluster,
    starts: ParticleConfig,
    target: Site,
    escape_limit2: int,
    randomness: Randomness,
    continuation: Optional[RngStream] = None,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Dict[Site, int]:
    """
    grow_sequential that also counts, per start site, the explorers that
    stand on target before going beyond norm² escape_limit2. The settling
    path is watched first; an explorer that settles undecided keeps walking
    freely from its settling site on the continuation stream.
    """
    if continuation is None:
        continuation = continuation_stream(randomness)
    hits: Dict[Site, int] = {s: 0 for s in starts.counts}
    center = origin(cluster.dim)
    for start in starts.launches():
        budget = _budget(cluster, start, config)
        if _compiled(cluster, randomness):
            site, seen = _settle_free(cluster, start, randomness, budget, target, escape_limit2)
        else:
            site, seen = _settle_interpreted(cluster, start, randomness, budget, target, escape_limit2)
        cluster.add(site)
        if seen == 0:
            hit = batch_hit_or_exit([site], target, center, escape_limit2, continuation, config=config)
            seen = HIT_TARGET if hit[0] else ESCAPED_FIRST
        if seen == HIT_TARGET:
            hits[start] += 1
    return hits


# ---------------------------
# Waves
# ---------------------------

@dataclass
class WaveOutcome:
    radius: Real
    launched: int = 0
    settled: Set[Site] = field(default_factory=set)        # A_R
    stopped: ParticleConfig = field(default_factory=ParticleConfig)  # ζ_R
    visits: Dict[Site, int] = field(default_factory=dict)   # W_R
    free_exits: Dict[Site, int] = field(default_factory=dict)  # M_R

    def coupling_violations(self) -> List[Site]:
        """Boundary sites with W_R(z) > M_R(z)."""
        return sorted(z for z in self.stopped.counts if self.visits.get(z, 0) > self.free_exits.get(z, 0))


def continuation_stream(randomness: Randomness) -> RngStream:
    """Independent stream for free continuations; never consumes stacks."""
    return randomness.fork()


def _wave_compiled(
    cluster: Cluster,
    starts: ParticleConfig,
    limit2: int,
    rng: RngStream,
    outcome: WaveOutcome,
    continuation: Optional[RngStream],
    budget: int,
) -> None:
    occ: DenseOccupancy = cluster.occupied  # type: ignore[assignment]
    visits = np.zeros(occ.grid.size, dtype=np.int64)
    last_seen = np.full(occ.grid.size, -1, dtype=np.int64)
    free_exits = outcome.free_exits
    track = continuation is not None
    for explorer, start in enumerate(starts.launches()):
        outcome.launched += 1
        x = np.array(start, dtype=np.int64)
        status, steps = drive(kernels.wave_walk, rng, cluster.dim,
                              (x, occ.grid, occ.extent, visits, last_seen, explorer, limit2), 0, budget)
        pos = tuple(int(c) for c in x)
        if status == kernels.BUDGET:
            raise StepBudgetExceeded(
                f"explorer from {start} neither settled nor left the ball after {budget} steps",
                state=WalkState(pos, steps), budget=budget, start=start,
            )
        if status == kernels.STOPPED:
            outcome.stopped.add(pos)
            if track:
                free_exits[pos] = free_exits.get(pos, 0) + 1
            continue
        cluster.add(pos)
        outcome.settled.add(pos)
        if track:
            exit_site = exit_ball(pos, limit2, continuation, budget)
            free_exits[exit_site] = free_exits.get(exit_site, 0) + 1
    flat = np.flatnonzero(visits)
    outcome.visits.update(zip(occ.sites_at(flat), (int(v) for v in visits[flat])))


def _wave_interpreted(
    cluster: Cluster,
    starts: ParticleConfig,
    limit2: int,
    randomness: Randomness,
    outcome: WaveOutcome,
    continuation: Optional[RngStream],
    budget: int,
) -> None:
    occupied = cluster.occupied
    visits = outcome.visits
    free_exits = outcome.free_exits
    track = continuation is not None
    nxt = direction_source(randomness, cluster.dim)

    for start in starts.launches():
        outcome.launched += 1
        seen: Set[Site] = set()
        pos = start
        steps = 0
        while True:
            if norm2(pos) > limit2:
                outcome.stopped.add(pos)
                seen.add(pos)
                if track:
                    free_exits[pos] = free_exits.get(pos, 0) + 1
                break
            seen.add(pos)
            if pos not in occupied:
                cluster.add(pos)
                outcome.settled.add(pos)
                if track:
                    exit_site = exit_ball(pos, limit2, continuation, budget)
                    free_exits[exit_site] = free_exits.get(exit_site, 0) + 1
                break
            if steps >= budget:
                raise StepBudgetExceeded(
                    f"explorer from {start} neither settled nor left the ball after {budget} steps",
                    state=WalkState(pos, steps, isinstance(randomness, InstructionStacks)),
                    budget=budget, start=start,
                )
            pos = move(pos, nxt(pos))
            steps += 1
        for z in seen:
            visits[z] = visits.get(z, 0) + 1


def wave_run(
    cluster: Cluster,
    starts: ParticleConfig,
    R: Real,
    randomness: Randomness,
    continuation: Optional[RngStream] = None,
    track_free_exits: bool = True,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> WaveOutcome:
    """
    Explorers settle on the first unoccupied site inside 𝔹(0,R), or are
    stopped at their first site with norm >= R. Settled sites are added
    to the cluster.
    """
    if R <= 0:
        raise DomainError(f"wave radius must be > 0, got {R!r}")
    limit2 = strict_limit(R)
    outcome = WaveOutcome(radius=R)
    if starts.total == 0:
        return outcome
    if not track_free_exits:
        continuation = None
    elif continuation is None:
        continuation = continuation_stream(randomness)
    budget = config.budget_for_norm2(max(limit2, cluster.max_norm2))

    occ = cluster.occupied
    if (_compiled(cluster, randomness) and occ.holds_ball(limit2)
            and all(occ.index(s) >= 0 for s in starts.counts)):
        _wave_compiled(cluster, starts, limit2, randomness, outcome, continuation, budget)
    else:
        _wave_interpreted(cluster, starts, limit2, randomness, outcome, continuation, budget)

    log.debug("wave R=%s: launched=%d settled=%d stopped=%d",
              R, outcome.launched, len(outcome.settled), outcome.stopped.total)
    return outcome


def three_wave_build(
    n: int,
    m: int,
    R: Real,
    randomness: Randomness,
    dim: Optional[int] = None,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Cluster:
    """
    Wave 1: n explorers from the origin. Wave 2: m green explorers stopped
    on ∂𝔹(0,R). Wave 3: the green explorers resume from ζ_R.
    """
    if n < 0 or m < 0:
        raise DomainError(f"particle numbers must be >= 0, got n={n}, m={m}")
    if dim is None:
        if not isinstance(randomness, InstructionStacks):
            raise DomainError("dim is required when growing from a free stream")
        dim = randomness.dim
    cluster = grow_from_origin(dim, n, randomness, config=config)
    if m == 0:
        return cluster
    green = wave_run(cluster, ParticleConfig.point(origin(dim), m), R, randomness,
                     track_free_exits=False, config=config)
    return grow_sequential(cluster, green.stopped, randomness, config)


def poisson_sample(lam: float, randomness: RngStream) -> int:
    if lam < 0:
        raise DomainError(f"Poisson parameter must be >= 0, got {lam}")
    if not isinstance(randomness, RngStream):
        raise DomainError("Poisson draws need a free RngStream")
    return randomness.poisson(lam)


# ---------------------------
# Snapshots
# ---------------------------

HEADER_RE = re.compile(r"^# idla d=(?P<dim>\d+) particles=(?P<particles>\d+) seed=(?P<seed>-?\d+)\s*$")


def snapshot_text(cluster: Cluster, seed: int) -> str:
    lines = [f"# idla d={cluster.dim} particles={cluster.particle_count} seed={seed}"]
    lines.extend(" ".join(str(c) for c in site) for site in sorted(cluster.occupied))
    return "\n".join(lines) + "\n"


def write_snapshot(cluster: Cluster, path: Path, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(snapshot_text(cluster, seed), encoding="utf-8")
    return path


def read_snapshot(path: Path) -> Tuple[Cluster, Dict[str, int]]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise IdlaError(f"empty snapshot: {path}")
    m = HEADER_RE.match(text[0])
    if not m:
        raise IdlaError(f"bad snapshot header in {path}: {text[0]!r}")
    meta = {k: int(v) for k, v in m.groupdict().items()}
    sites = [tuple(int(x) for x in ln.split()) for ln in text[1:] if ln.strip()]
    cluster = Cluster(meta["dim"])
    for site in sites:
        cluster._insert(site)
    cluster.particle_count = meta["particles"]
    cluster.initial_size = len(cluster) - cluster.particle_count
    return cluster, meta
