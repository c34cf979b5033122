"""Desk-scale statistical checks of the growth model and its probes."""
import math
import random
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from idla.aggregation import (
    Cluster,
    ParticleConfig,
    grow_from_origin,
    grow_from_starts,
    settle,
    three_wave_build,
    wave_run,
)
from idla.exact_oracle import cluster_distribution_exact, settle_distribution_exact, tv_distance
from idla.fluctuations import (
    ScalingProfile,
    bound_violations,
    deep_hole_experiment,
    deep_hole_waves,
    directional_miss,
    error_record,
    mean_visits_lower_trend,
    scaling_fit,
    tentacle_experiment,
    visits_per_gap_bound,
)
from idla.harmonic import joint_zero_probe
from idla.lattice import axis_site, ball_count, rho
from idla.pipeline import RESULTS_NAME, ExperimentConfig, run
from idla.walks import InstructionStacks, RngStream


def test_rho_inverts_ball_count_up_to_two_hundred():
    for dim in (2, 3):
        for n in range(201):
            assert rho(dim, ball_count(dim, n)) == n


def test_no_coupling_violations_over_random_waves():
    pick = random.Random(2024)
    for trial in range(100):
        dim = pick.choice((2, 3))
        randomness = InstructionStacks(trial, dim) if trial % 2 else RngStream(trial)
        extent = None if trial % 3 else 10
        cluster = grow_from_origin(dim, pick.randint(0, 40), randomness, extent=extent)
        starts = ParticleConfig.point((0,) * dim, pick.randint(1, 60))
        out = wave_run(cluster, starts, pick.choice((1.5, 2, 3, 4)), randomness)
        assert out.coupling_violations() == []
        assert len(out.settled) + out.stopped.total == out.launched


def test_two_site_exit_law_matches_the_absorption_solve():
    two = [(0, 0), (1, 0)]
    exact = settle_distribution_exact(two, (0, 0))
    cluster = Cluster(2, two)
    rng = RngStream(404)
    n = 20_000
    counts = {}
    for _ in range(n):
        site = settle(cluster, (0, 0), rng)
        counts[site] = counts.get(site, 0) + 1
    assert set(counts) <= set(exact)
    for y, p in exact.items():
        p = float(p)
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(y, 0) / n - p) < 4 * sigma


def test_three_wave_law_matches_the_exact_shape_law():
    exact = cluster_distribution_exact(3, 2)
    rng = RngStream(505)
    n = 20_000
    freq = {}
    for _ in range(n):
        shape = frozenset(three_wave_build(2, 1, 1, rng, dim=2).sites())
        freq[shape] = freq.get(shape, 0) + 1
    assert tv_distance(exact, {s: c / n for s, c in freq.items()}) < 0.04


def _pooled_table(a, b, floor=20):
    """2×k table over the values of a and b; values seen fewer than floor times share a bin."""
    seen = Counter(a) + Counter(b)
    cols = sorted(v for v in seen if seen[v] >= floor) + [None]
    key = lambda v: v if seen[v] >= floor else None
    ca, cb = Counter(map(key, a)), Counter(map(key, b))
    return np.array([[ca.get(c, 0) for c in cols], [cb.get(c, 0) for c in cols]])


@pytest.mark.slow
def test_three_waves_and_plain_growth_share_a_law():
    replicas = 2000
    plain = [grow_from_origin(2, 30, RngStream(7, r)).max_norm2 for r in range(replicas)]
    waves = [three_wave_build(20, 10, 2, RngStream(8, r), dim=2).max_norm2 for r in range(replicas)]
    table = _pooled_table(plain, waves)
    table = table[:, table.sum(axis=0) > 0]
    _chi2, p, _dof, _expected = stats.chi2_contingency(table)
    assert p > 1e-3


@pytest.mark.slow
def test_abelian_invariance_at_five_hundred_particles():
    starts = [(0, 0)] * 500
    reference = grow_from_starts(Cluster(2), starts, InstructionStacks(31, 2)).sites()
    mixed = [(0, 0)] * 200 + [(1, 0)] * 100 + [(0, 1)] * 100 + [(-1, 0)] * 100
    pick = random.Random(31)
    mixed_reference = grow_from_starts(Cluster(2), mixed, InstructionStacks(32, 2)).sites()
    for _ in range(20):
        order = mixed[:]
        pick.shuffle(order)
        assert grow_from_starts(Cluster(2), order, InstructionStacks(32, 2)).sites() == mixed_reference
    built = three_wave_build(200, 300, 10, InstructionStacks(31, 2))
    assert built.sites() == reference


@pytest.mark.slow
def test_shape_errors_at_radius_one_hundred():
    n = 100
    b = ball_count(2, n)
    good = 0
    for replica in range(20):
        cluster = grow_from_origin(2, b, RngStream(100, replica), extent=2 * n + 2)
        rec = error_record(cluster, n)
        good += rec.delta_inner <= 10 and rec.delta_outer <= 10
    assert good >= 19


@pytest.mark.slow
def test_inner_error_grows_with_radius_in_three_dimensions():
    radii = (4, 8, 16, 32)
    records = []
    for n in radii:
        b = ball_count(3, n)
        for replica in range(30):
            cluster = grow_from_origin(3, b, RngStream(300, replica, (n,)), extent=2 * n + 2)
            records.append(error_record(cluster, n, replica=replica))
    mean = {n: np.mean([r.delta_inner for r in records if r.n == n]) for n in radii}
    assert mean[32] > mean[4]
    slope, _stderr = scaling_fit(records)
    assert slope > 0


@pytest.mark.slow
def test_directional_miss_decreases_with_the_gap():
    n, gaps, replicas = 12, (1, 2, 3, 4), 2000
    b = ball_count(2, n)
    misses = dict.fromkeys(gaps, 0)
    for replica in range(replicas):
        cluster = grow_from_origin(2, b, RngStream(12, replica), extent=2 * n + 2)
        for g in gaps:
            misses[g] += directional_miss(cluster, axis_site(2, n - g))
    p = [misses[g] / replicas for g in gaps]
    assert p[0] > p[1] > p[2] >= p[3]
    # log P concave in the gap, within two standard errors
    for i in range(1, len(p) - 1):
        if min(p[i - 1], p[i], p[i + 1]) == 0:
            continue
        second = math.log(p[i + 1]) - 2 * math.log(p[i]) + math.log(p[i - 1])
        var = sum(c * c * (1 - q) / (replicas * q) for c, q in zip((1, -2, 1), p[i - 1:i + 2]))
        assert second <= 2 * math.sqrt(var)


@pytest.mark.slow
def test_mean_visits_grow_with_the_gap():
    rows = mean_visits_lower_trend(12, [2, 4, 6], 200, seed=12)
    means = [r.mean for r in rows]
    assert means == sorted(means)
    point, lower = visits_per_gap_bound(rows)
    assert point > 0 and lower > 0


@pytest.mark.slow
def test_joint_zero_decay_in_three_dimensions():
    grid = [10, 20, 40, 80]
    fit = joint_zero_probe(grid, (6, 0, 0), 3, 10_000, RngStream(610))
    assert fit.fitted_constant > 0
    assert fit.r_squared > 0.9
    usable = [pt for pt in fit.points if pt["p_zero"] > 0]
    assert len(usable) >= 3
    neg_log = [-math.log(pt["p_zero"]) for pt in usable]
    assert neg_log == sorted(neg_log)


@pytest.mark.slow
def test_deep_hole_harness_in_three_dimensions():
    profile = ScalingProfile(0.4, 0.4, 1.0)
    waves = deep_hole_waves(20, profile)
    event_c = 0
    total_waves = 0
    for replica in range(20):
        records = deep_hole_experiment(20, profile, RngStream(20, replica), dim=3)
        assert len(records) == waves
        assert bound_violations(records) == 0
        assert records[-1].cluster_size == ball_count(3, 20) + sum(r.X_k for r in records)
        event_c += sum(r.event_C for r in records)
        total_waves += len(records)
    assert event_c >= 0.9 * total_waves


@pytest.mark.slow
def test_green_explorer_count_stays_below_twice_its_mean():
    profile = ScalingProfile(0.5, 0.5, 0.5)
    ok = sum(tentacle_experiment(50, profile, RngStream(50, r)).x_bound_ok for r in range(100))
    assert ok >= 99


@pytest.mark.slow
def test_results_do_not_depend_on_the_worker_count(tmp_path):
    texts = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        cfg = ExperimentConfig(experiment="deep-hole", n=12, dimension=2, replicas=8, seed=77,
                               threads=threads, output_dir=str(out))
        run(cfg)
        texts.append((out / RESULTS_NAME).read_bytes())
    assert texts[0] == texts[1]
