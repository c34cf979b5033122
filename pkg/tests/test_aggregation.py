from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idla.aggregation import (
    HEADER_RE,
    Cluster,
    ParticleConfig,
    grow_from_origin,
    grow_from_starts,
    poisson_sample,
    read_snapshot,
    release_tracking_hits,
    settle,
    three_wave_build,
    wave_run,
    write_snapshot,
)
from idla.errors import DomainError, IdlaError
from idla.lattice import ball_count, ball_sites, neighbors, norm2, strict_limit
from idla.walks import InstructionStacks, RngStream

MIXED_STARTS = [(0, 0)] * 30 + [(1, 0)] * 10 + [(0, -1)] * 10 + [(-1, 0)] * 10


def _connected(sites):
    sites = set(sites)
    if not sites:
        return True
    start = next(iter(sites))
    seen = {start}
    queue = deque([start])
    while queue:
        x = queue.popleft()
        for y in neighbors(x):
            if y in sites and y not in seen:
                seen.add(y)
                queue.append(y)
    return seen == sites


def test_settle_on_empty_cluster_is_start(stream):
    assert settle(Cluster(2), (0, 0), stream) == (0, 0)


def test_single_particle():
    cluster = grow_from_origin(2, 1, RngStream(1))
    assert cluster.sites() == {(0, 0)}


def test_growth_conserves_particles(stacks2):
    n = ball_count(2, 5)
    cluster = grow_from_origin(2, n, stacks2)
    assert len(cluster) == cluster.particle_count == 69
    assert (0, 0) in cluster
    assert _connected(cluster.sites())


def test_dense_and_sparse_storage_agree():
    dense = grow_from_origin(2, 150, InstructionStacks(3, 2), extent=4)
    sparse = grow_from_origin(2, 150, InstructionStacks(3, 2))
    assert dense.sites() == sparse.sites()


def test_dense_storage_keeps_sites_outside_the_box():
    cluster = Cluster(2, [(0, 0), (100, 0)], extent=3)
    assert cluster.sites() == {(0, 0), (100, 0)}
    assert (100, 0) in cluster


def test_adding_occupied_site_fails():
    cluster = Cluster(2, [(0, 0)])
    with pytest.raises(IdlaError):
        cluster.add((0, 0))


def test_min_unoccupied_of_full_ball(ball5):
    assert ball5.min_unoccupied_norm2 == 25
    hole = Cluster(2, [y for y in ball_sites(2, 5) if y != (3, 0)])
    assert hole.min_unoccupied_site() == (3, 0)


@settings(max_examples=15, deadline=None)
@given(st.permutations(MIXED_STARTS))
def test_launch_order_does_not_change_the_cluster(order):
    reference = grow_from_starts(Cluster(2), MIXED_STARTS, InstructionStacks(17, 2)).sites()
    permuted = grow_from_starts(Cluster(2), order, InstructionStacks(17, 2)).sites()
    assert permuted == reference


def test_three_waves_match_sequential_growth():
    built = three_wave_build(200, 100, 10, InstructionStacks(99, 2))
    direct = grow_from_origin(2, 300, InstructionStacks(99, 2))
    assert built.sites() == direct.sites()


def test_three_waves_without_green_explorers():
    built = three_wave_build(40, 0, 3, InstructionStacks(4, 3))
    assert built.sites() == grow_from_origin(3, 40, InstructionStacks(4, 3)).sites()


def test_three_waves_on_free_stream_conserve_mass():
    built = three_wave_build(50, 30, 3, RngStream(8), dim=2)
    assert len(built) == 80


def test_three_waves_need_dim_for_free_stream():
    with pytest.raises(DomainError):
        three_wave_build(5, 5, 2, RngStream(8))


def test_wave_with_no_explorers(stacks2):
    out = wave_run(Cluster(2), ParticleConfig(), 3, stacks2)
    assert out.launched == 0 and not out.settled and out.stopped.total == 0


@pytest.mark.parametrize("dim,seed", [(2, 1), (2, 2), (3, 1), (3, 2)])
def test_wave_conservation_and_coupling(dim, seed):
    stacks = InstructionStacks(seed, dim)
    cluster = grow_from_origin(dim, 30, stacks)
    before = cluster.sites()
    out = wave_run(cluster, ParticleConfig.point((0,) * dim, 60), 3, stacks)
    limit2 = strict_limit(3)
    assert len(out.settled) + out.stopped.total == out.launched == 60
    assert all(norm2(y) <= limit2 for y in out.settled)
    assert all(norm2(y) > limit2 for y in out.stopped.counts)
    assert not out.settled & before
    assert cluster.sites() == before | out.settled
    assert out.coupling_violations() == []


def test_wave_over_full_ball_stops_everything(stacks2):
    cluster = Cluster(2, ball_sites(2, 6))
    out = wave_run(cluster, ParticleConfig.point((0, 0), 50), 5, stacks2)
    assert not out.settled
    assert out.stopped.total == 50
    for z, count in out.stopped.counts.items():
        assert out.visits[z] == count == out.free_exits[z]


def test_poisson_sample_edge_cases():
    rng = RngStream(2)
    assert poisson_sample(0, rng) == 0
    with pytest.raises(DomainError):
        poisson_sample(-1, rng)


def test_poisson_sample_moments():
    rng = RngStream(2)
    draws = [poisson_sample(5, rng) for _ in range(20_000)]
    mean = sum(draws) / len(draws)
    var = sum((x - mean) ** 2 for x in draws) / (len(draws) - 1)
    assert abs(mean - 5) < 0.1
    assert abs(var - 5) < 0.3


def test_particle_config_rejects_negative_counts():
    with pytest.raises(DomainError):
        ParticleConfig({(0, 0): -1})


def test_particle_config_launch_order():
    eta = ParticleConfig({(1, 0): 2, (0, 0): 1})
    assert list(eta.launches()) == [(0, 0), (1, 0), (1, 0)]
    assert eta.total == 3


def test_snapshot_round_trip(tmp_path, stacks2):
    cluster = grow_from_origin(2, 25, stacks2)
    path = write_snapshot(cluster, tmp_path / "cluster_0.txt", seed=7)
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert HEADER_RE.match(first)
    loaded, meta = read_snapshot(path)
    assert meta == {"dim": 2, "particles": 25, "seed": 7}
    assert loaded.sites() == cluster.sites()


def test_snapshot_with_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 0\n", encoding="utf-8")
    with pytest.raises(IdlaError):
        read_snapshot(path)


@pytest.mark.parametrize("dim,extent", [(2, 3), (2, 12), (3, 2), (3, 6)])
def test_compiled_growth_matches_interpreted_growth(dim, extent):
    dense = grow_from_origin(dim, 120, RngStream(5), extent=extent)
    sparse = grow_from_origin(dim, 120, RngStream(5))
    assert dense.sites() == sparse.sites()
    assert len(dense) == 120


@pytest.mark.parametrize("dim", [2, 3])
def test_compiled_wave_matches_interpreted_wave(dim):
    def build(extent):
        rng = RngStream(9)
        cluster = grow_from_origin(dim, 40, rng, extent=extent)
        return cluster, wave_run(cluster, ParticleConfig.point((0,) * dim, 50), 4, rng)

    dense_cluster, dense = build(8)
    sparse_cluster, sparse = build(None)
    assert dense_cluster.sites() == sparse_cluster.sites()
    assert dense.settled == sparse.settled
    assert dense.stopped.counts == sparse.stopped.counts
    assert dense.visits == sparse.visits
    assert dense.free_exits == sparse.free_exits
    assert dense.coupling_violations() == []


def test_wave_too_wide_for_the_box_still_runs():
    rng = RngStream(2)
    cluster = grow_from_origin(2, 30, rng, extent=3)
    out = wave_run(cluster, ParticleConfig.point((0, 0), 40), 6, rng)
    assert len(out.settled) + out.stopped.total == 40
    assert len(cluster) == 30 + len(out.settled)


@pytest.mark.parametrize("extent", [None, 8])
def test_release_tracking_counts_explorers_on_the_target(extent):
    cluster = Cluster(2, ball_sites(2, 5), extent=extent)
    starts = ParticleConfig({(5, 0): 2, (0, 5): 1})
    hits = release_tracking_hits(cluster, starts, (5, 0), 24, RngStream(3))
    # starts on the target count; a start beyond the escape ball never does
    assert hits == {(5, 0): 2, (0, 5): 0}
    assert len(cluster) == 69 + 3
    assert (5, 0) in cluster and (0, 5) in cluster


def test_release_tracking_agrees_on_dense_and_sparse_clusters():
    starts = ParticleConfig({(5, 0): 3, (4, 3): 4, (0, -5): 2})
    results = []
    for extent in (None, 9):
        cluster = Cluster(2, ball_sites(2, 5), extent=extent)
        hits = release_tracking_hits(cluster, starts, (5, 1), strict_limit(12), RngStream(21))
        results.append((hits, cluster.sites()))
    assert results[0] == results[1]
    assert sum(results[0][0].values()) <= starts.total


def test_release_tracking_grows_like_sequential_growth():
    starts = ParticleConfig({(5, 0): 3, (3, 4): 2})
    tracked = Cluster(2, ball_sites(2, 5))
    release_tracking_hits(tracked, starts, (6, 0), strict_limit(9), InstructionStacks(4, 2))
    plain = Cluster(2, ball_sites(2, 5))
    grow_from_starts(plain, starts.launches(), InstructionStacks(4, 2))
    assert tracked.sites() == plain.sites()
