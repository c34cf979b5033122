from __future__ import annotations

import hashlib
import logging
import math
import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Container, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from idla import kernels
from idla.errors import StepBudgetExceeded
from idla.lattice import Site, move, norm2

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_FORK_TAG = 0x5EED0000


# ---------------------------
# Config
# ---------------------------

@dataclass
class WalkConfig:
    # budget = factor * (diameter + 2)^2 steps per walk
    step_budget_factor: float = 1e4

    def budget_for_radius(self, radius: float) -> int:
        diameter = 2.0 * radius
        return int(self.step_budget_factor * (diameter + 2.0) ** 2)

    def budget_for_norm2(self, max_norm2: int) -> int:
        return self.budget_for_radius(math.sqrt(max(0, max_norm2)))


DEFAULT_WALK_CONFIG = WalkConfig()


# ---------------------------
# Randomness
# ---------------------------

class RngStream:
    """
    Independent stream identified by (seed, stream_id[, path...]).
    Directions come out of a buffered uint8 block shared by the
    interpreted step and the compiled kernels, so both read the same moves.
    """

    BLOCK = 1 << 16

    def __init__(self, seed: int, stream_id: int = 0, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed & _MASK64, self.stream_id & _MASK64] + [p & _MASK64 for p in self.path]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self._buf = np.empty(0, dtype=np.uint8)
        self._pos = 0
        self._buf_dim = 0
        self._forks = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"

    def directions(self, dim: int) -> Tuple[np.ndarray, int]:
        """Current direction block and read position; refilled once spent."""
        if self._pos >= self._buf.size or self._buf_dim != dim:
            self._buf = self.generator.integers(0, 2 * dim, size=self.BLOCK, dtype=np.uint8)
            self._buf_dim = dim
            self._pos = 0
        return self._buf, self._pos

    def consume(self, pos: int) -> None:
        self._pos = int(pos)

    def direction(self, dim: int) -> int:
        buf, pos = self.directions(dim)
        self._pos = pos + 1
        return int(buf[pos])

    def poisson(self, lam: float) -> int:
        return int(self.generator.poisson(lam)) if lam > 0 else 0

    def spawn(self, child_id: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(child_id),))

    def fork(self) -> "RngStream":
        """Next child stream in a deterministic sequence."""
        self._forks += 1
        return self.spawn(_FORK_TAG + self._forks)

    def permutation(self, n: int) -> list:
        return self.generator.permutation(n).tolist()


class _SiteStack:
    __slots__ = ("key", "chunk_index", "chunk", "popped")

    def __init__(self, key: int):
        self.key = key
        self.chunk_index = -1
        self.chunk = b""
        self.popped = 0


class InstructionStacks:
    """
    Site-indexed move sequences. Instruction k at a site is fixed by
    (seed, stream_id, site, k); only the current chunk is kept per site.
    """

    CHUNK = 256

    def __init__(self, seed: int, dim: int, stream_id: int = 0):
        self.seed = int(seed)
        self.dim = int(dim)
        self.stream_id = int(stream_id)
        self._entries: Dict[Site, _SiteStack] = {}
        self._lock = threading.Lock()
        self._forks = 0

    def fork(self) -> RngStream:
        """Free stream tied to this stack set; draws never touch the stacks."""
        self._forks += 1
        return RngStream(self.seed, self.stream_id, (_FORK_TAG, self._forks))

    def _site_key(self, site: Site) -> int:
        h = hashlib.blake2b(repr((self.seed, self.stream_id, tuple(site))).encode("utf-8"), digest_size=16)
        return int.from_bytes(h.digest(), "little")

    def _chunk(self, key: int, j: int) -> bytes:
        # chunks sit 2^192 counter steps apart, so they never overlap
        bg = np.random.Philox(key=key, counter=j << 192)
        draws = np.random.Generator(bg).integers(0, 2 * self.dim, size=self.CHUNK, dtype=np.uint8)
        return draws.tobytes()

    def _entry(self, site: Site) -> _SiteStack:
        entry = self._entries.get(site)
        if entry is None:
            with self._lock:
                entry = self._entries.get(site)
                if entry is None:
                    entry = _SiteStack(self._site_key(site))
                    self._entries[site] = entry
        return entry

    def instruction(self, site: Site, k: int) -> int:
        """Read position k of the stack at site without consuming anything."""
        entry = self._entry(site)
        j, i = divmod(k, self.CHUNK)
        if entry.chunk_index == j:
            return entry.chunk[i]
        return self._chunk(entry.key, j)[i]

    def pop(self, site: Site) -> int:
        entry = self._entry(site)
        j, i = divmod(entry.popped, self.CHUNK)
        if entry.chunk_index != j:
            entry.chunk = self._chunk(entry.key, j)
            entry.chunk_index = j
        entry.popped += 1
        return entry.chunk[i]

    def popped(self, site: Site) -> int:
        entry = self._entries.get(site)
        return entry.popped if entry else 0


Randomness = Union[RngStream, InstructionStacks]


def direction_source(randomness: Randomness, dim: int) -> Callable[[Site], int]:
    if isinstance(randomness, InstructionStacks):
        return randomness.pop
    draw = randomness.direction
    return lambda _site: draw(dim)


# ---------------------------
# Single walks
# ---------------------------

@dataclass(frozen=True)
class WalkState:
    position: Site
    steps_taken: int = 0
    stack_mode: bool = False


class HitOutcome(str, Enum):
    HIT = "hit"
    ESCAPED = "escaped"


def step(state: WalkState, randomness: Randomness) -> WalkState:
    if isinstance(randomness, InstructionStacks):
        k = randomness.pop(state.position)
        stack_mode = True
    else:
        k = randomness.direction(len(state.position))
        stack_mode = False
    return replace(state, position=move(state.position, k), steps_taken=state.steps_taken + 1, stack_mode=stack_mode)


def _region_budget(region: Container[Site], config: WalkConfig) -> int:
    max_n2 = getattr(region, "max_norm2", None)
    if max_n2 is None:
        max_n2 = max((norm2(x) for x in region), default=0)  # type: ignore[attr-defined]
    return config.budget_for_norm2(max_n2)


def run_until_exit(
    state: WalkState,
    region: Container[Site],
    randomness: Randomness,
    budget: Optional[int] = None,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> Tuple[Site, int]:
    """First position outside region (the start itself when already outside)."""
    pos = state.position
    if pos not in region:
        return pos, 0
    if budget is None:
        budget = _region_budget(region, config)
    nxt = direction_source(randomness, len(pos))
    steps = 0
    while pos in region:
        if steps >= budget:
            raise StepBudgetExceeded(
                f"walk from {state.position} did not leave region after {budget} steps",
                state=WalkState(pos, state.steps_taken + steps, isinstance(randomness, InstructionStacks)),
                budget=budget,
                start=state.position,
            )
        pos = move(pos, nxt(pos))
        steps += 1
    return pos, steps


def run_until_hit_or_exit(
    start: Site,
    target: Site,
    escape_region: Union[Container[Site], Callable[[Site], bool]],
    randomness: Randomness,
    budget: int = 10 ** 7,
) -> HitOutcome:
    """
    HIT iff the walk stands on target strictly before leaving escape_region.
    A step that leaves the region counts as an escape even if it lands on
    target.
    """
    if start == target:
        return HitOutcome.HIT
    inside = escape_region if callable(escape_region) else escape_region.__contains__
    if not inside(start):
        return HitOutcome.ESCAPED
    nxt = direction_source(randomness, len(start))
    pos = start
    steps = 0
    while True:
        if steps >= budget:
            raise StepBudgetExceeded(
                f"walk from {start} neither hit {target} nor escaped after {budget} steps",
                state=WalkState(pos, steps, isinstance(randomness, InstructionStacks)),
                budget=budget,
                start=start,
            )
        pos = move(pos, nxt(pos))
        steps += 1
        if not inside(pos):
            return HitOutcome.ESCAPED
        if pos == target:
            return HitOutcome.HIT


# ---------------------------
# Batch walks (free stream, compiled)
# ---------------------------

def _as_array(sites: Iterable[Site]) -> np.ndarray:
    if isinstance(sites, np.ndarray):
        return np.array(sites, dtype=np.int64, ndmin=2)
    arr = np.asarray(list(sites), dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(0, 0) if arr.size == 0 else arr.reshape(1, -1)
    return arr


def drive(kernel, rng: RngStream, dim: int, head: tuple, steps: int, budget: int) -> Tuple[int, int]:
    """
    Call a single-walk kernel as kernel(*head, buf, pos, steps, budget),
    refilling the direction block until it reports something other than
    EXHAUSTED. Returns (status, steps).
    """
    while True:
        buf, pos = rng.directions(dim)
        status, pos, steps = kernel(*head, buf, pos, steps, budget)
        rng.consume(pos)
        if status != kernels.EXHAUSTED:
            return status, steps


def _drive_rows(kernel, xs: np.ndarray, head: tuple, rng: RngStream, budget: int, what: str) -> None:
    row, steps = 0, 0
    dim = xs.shape[1]
    while True:
        buf, pos = rng.directions(dim)
        status, row, pos, steps = kernel(xs, row, *head, buf, pos, steps, budget)
        rng.consume(pos)
        if status == kernels.DONE:
            return
        if status == kernels.BUDGET:
            site = tuple(int(c) for c in xs[row])
            raise StepBudgetExceeded(
                f"batch walk {row} {what} after {budget} steps",
                state=WalkState(site, steps), budget=budget,
            )


def exit_ball(start: Site, limit2: int, rng: RngStream, budget: int) -> Site:
    """First site with norm² > limit2 on a free walk from start."""
    if norm2(start) > limit2:
        return start
    xs = np.array([start], dtype=np.int64)
    _drive_rows(kernels.exit_walks, xs, (limit2,), rng, budget, f"still inside norm² <= {limit2}")
    return tuple(int(c) for c in xs[0])


def batch_exit_ball(
    starts: Iterable[Site],
    limit2: int,
    rng: RngStream,
    budget: Optional[int] = None,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> np.ndarray:
    """
    Walk every start until its norm² exceeds limit2 (first exit of the ball
    whose strict interior has norm² <= limit2). Returns exit positions.
    The budget applies per walk.
    """
    pos = _as_array(starts)
    if pos.size == 0:
        return pos
    if budget is None:
        budget = config.budget_for_norm2(limit2)
    _drive_rows(kernels.exit_walks, pos, (limit2,), rng, budget, f"still inside norm² <= {limit2}")
    return pos


def batch_hit_or_exit(
    starts: Iterable[Site],
    target: Site,
    center: Site,
    limit2: int,
    rng: RngStream,
    budget: Optional[int] = None,
    config: WalkConfig = DEFAULT_WALK_CONFIG,
) -> np.ndarray:
    """
    run_until_hit_or_exit for every start, escape region
    {y : ‖y - center‖² <= limit2}. Returns a boolean hit mask.
    """
    pos = _as_array(starts)
    m = pos.shape[0]
    if m == 0 or pos.size == 0:
        return np.zeros(m, dtype=bool)
    hits = np.zeros(m, dtype=np.uint8)
    tgt = np.asarray(target, dtype=np.int64)
    ctr = np.asarray(center, dtype=np.int64)
    if budget is None:
        budget = config.budget_for_norm2(limit2)
    _drive_rows(kernels.hit_walks, pos, (hits, tgt, ctr, limit2), rng, budget,
                f"neither hit {target} nor escaped")
    return hits.astype(bool)
