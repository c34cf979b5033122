import math

import pytest

from idla.aggregation import Cluster, grow_from_origin
from idla.errors import DomainError
from idla.fluctuations import (
    ErrorRecord,
    ScalingProfile,
    VisitRow,
    bound_violations,
    check_error_bounds,
    deep_hole_experiment,
    deep_hole_waves,
    directional_miss,
    error_record,
    inner_error,
    inner_error_by_scan,
    mean_visits_lower_trend,
    outer_error,
    scaling_fit,
    tentacle_experiment,
    visits_per_gap_bound,
)
from idla.lattice import ball_count, ball_sites, rho
from idla.walks import InstructionStacks, RngStream


def test_errors_of_exact_ball(ball5):
    assert inner_error(ball5, 5) == 0
    assert outer_error(ball5, 5) == pytest.approx(math.sqrt(20) - 5)


def test_errors_of_single_site():
    cluster = Cluster(2, [(0, 0)])
    assert inner_error(cluster, 1) == 0
    assert outer_error(cluster, 0) == 0


def test_inner_error_with_hole():
    cluster = Cluster(2, [y for y in ball_sites(2, 5) if y != (3, 0)])
    assert inner_error(cluster, 5) == pytest.approx(2)
    assert inner_error_by_scan(cluster, 5) == pytest.approx(2)


def test_outer_error_with_far_site(ball5):
    ball5.add((7, 0))
    assert outer_error(ball5, 5) == pytest.approx(2)


def test_outer_error_of_empty_cluster():
    with pytest.raises(DomainError):
        outer_error(Cluster(2), 1)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_inner_error_agrees_with_ball_scan(seed):
    n = 8
    cluster = grow_from_origin(2, ball_count(2, n), InstructionStacks(seed, 2))
    assert inner_error(cluster, n) == pytest.approx(inner_error_by_scan(cluster, n))
    assert check_error_bounds(cluster, error_record(cluster, n)) == []


def test_directional_miss():
    cluster = Cluster(2, [(0, 0), (1, 0)])
    assert not directional_miss(cluster, (0, 0))
    assert directional_miss(cluster, (2, 0))


def test_profile_rejects_negative_constants():
    with pytest.raises(DomainError):
        ScalingProfile(-0.1, 0.4, 1.0)


def test_profile_values():
    p = ScalingProfile(0.5, 1.0, 2.0)
    s = math.sqrt(math.log(100))
    assert p.h(100) == pytest.approx(0.5 * s)
    assert p.Lbar(100) == pytest.approx(s)
    assert p.L(100) == pytest.approx(2 * s)
    assert p.h(1) == 0


def test_telescope_widths_decrease():
    widths = ScalingProfile(1.0, 1.0, 1.0).telescope_widths(1000)
    assert len(widths) >= 2
    assert all(a > b for a, b in zip(widths, widths[1:]))
    assert ScalingProfile(0.0, 0.0, 0.1).telescope_widths(10) == []


def test_deep_hole_wave_count():
    assert deep_hole_waves(100, ScalingProfile(1.0, 1.0, 1.0)) == 23
    with pytest.raises(DomainError):
        deep_hole_waves(100, ScalingProfile(0.0, 1.0, 1.0))


def test_scaling_fit_recovers_slope():
    records = [ErrorRecord(n, 2 * math.sqrt(math.log(n)), 0.0) for n in (10, 20, 40, 80)]
    slope, stderr = scaling_fit(records)
    assert slope == pytest.approx(2.0, abs=1e-9)
    assert stderr == pytest.approx(0.0, abs=1e-9)


def test_scaling_fit_of_zero_errors():
    records = [ErrorRecord(n, 0.0, 0.0) for n in (5, 10, 20)]
    slope, _ = scaling_fit(records, which="outer")
    assert slope == 0.0


def test_scaling_fit_needs_three_radii():
    with pytest.raises(DomainError):
        scaling_fit([ErrorRecord(5, 0.0, 0.0), ErrorRecord(10, 0.0, 0.0)])


def test_mean_visits_table():
    rows = mean_visits_lower_trend(6, [2, 6], replicas=3, seed=4)
    assert [r.gap for r in rows] == [2, 6]
    assert rows[1].mean == ball_count(2, 6)
    assert rows[0].mean >= 0
    with pytest.raises(DomainError):
        mean_visits_lower_trend(6, [7], replicas=1)


def test_visits_per_gap_bound():
    rows = [VisitRow(1, 10.0, 1.0, 5), VisitRow(2, 10.0, 0.0, 5)]
    point, lower = visits_per_gap_bound(rows, z_score=2.0)
    assert point == 5.0
    assert lower == 5.0
    with pytest.raises(DomainError):
        visits_per_gap_bound([])


def test_tentacle_without_green_explorers():
    report = tentacle_experiment(10, ScalingProfile(0.0, 0.4, 1.0), RngStream(3))
    assert report.lambda_n == 0
    assert report.X_n == 0
    assert report.final_size == report.b_n == ball_count(2, 10)
    assert report.threshold == 10


def test_tentacle_conserves_mass():
    report = tentacle_experiment(12, ScalingProfile(0.4, 0.4, 1.0), RngStream(5))
    assert report.final_size == report.b_n + report.X_n
    assert report.R_n == rho(2, report.final_size)
    row = report.as_row()
    assert "telescope_widths" not in row
    assert isinstance(row["cov_sites"], int)


def test_tentacle_needs_large_n():
    with pytest.raises(DomainError):
        tentacle_experiment(5, ScalingProfile(0.4, 0.4, 1.0), RngStream(5))


def test_deep_hole_bookkeeping():
    profile = ScalingProfile(0.4, 0.4, 1.0)
    records = deep_hole_experiment(10, profile, RngStream(21))
    assert len(records) == deep_hole_waves(10, profile)
    b = ball_count(2, 10)
    total = b
    for rec in records:
        total += rec.X_k
        assert rec.cluster_size == total
        assert rec.R_k == rho(2, total)
        assert rec.cap_hits + rec.complement_hits <= rec.X_k
        assert rec.event_I == (rec.cap_hits + rec.complement_hits == 0)
    assert bound_violations(records) == 0


def test_deep_hole_needs_beta_at_least_alpha():
    with pytest.raises(DomainError):
        deep_hole_experiment(10, ScalingProfile(0.5, 0.4, 1.0), RngStream(1))


def test_deep_hole_in_three_dimensions():
    profile = ScalingProfile(0.4, 0.4, 1.0)
    records = deep_hole_experiment(10, profile, RngStream(8), dim=3)
    total = ball_count(3, 10)
    for rec in records:
        total += rec.X_k
        assert rec.cluster_size == total
        assert rec.cap_hits + rec.complement_hits <= rec.X_k
    assert bound_violations(records) == 0
