import math

import numpy as np
import pytest

from sinaihole.errors import HorizonViolation, OverlapError
from sinaihole.geometry import (Scatterer, boundary_point, build_table, corridors,
                                default_table, verify_table)

from conftest import DEFAULT_SPECS, SMALL_SPECS


def test_perimeter_small_table(small_table):
    assert small_table.total_perimeter == pytest.approx(math.pi, abs=1e-15)
    assert small_table.cumulative_arclength[1] == pytest.approx(2 * math.pi * 0.3)


def test_perimeter_default_table(table):
    assert table.total_perimeter == pytest.approx(2 * math.pi * 0.6, abs=1e-15)


def test_cumulative_arclength_strictly_increasing(table):
    cum = table.cumulative_arclength
    assert cum[0] == 0.0
    assert np.all(np.diff(cum) > 0)
    assert cum[-1] == table.total_perimeter


@pytest.mark.parametrize("specs", [
    [((0, 0), 0.3), ((0.2, 0.2), 0.2)],
    [((0, 0), 0.6)],
    [((0, 0), 0.5)],  # touches its own translate
    [((0, 0), 0.3), ((0.5, 0.0), 0.2)],  # touching pair
    [((0.05, 0.0), 0.1), ((0.95, 0.0), 0.1)],  # overlap only across the torus seam
])
def test_overlap_rejected(specs):
    with pytest.raises(OverlapError):
        build_table(specs)


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        Scatterer((0, 0), 0.0)


def test_empty_table_rejected():
    with pytest.raises(ValueError):
        build_table([])


def test_dict_specs():
    t = build_table([{"center": [0, 0], "radius": 0.4}, {"center": [0.5, 0.5], "radius": 0.2}])
    assert t.total_perimeter == default_table().total_perimeter


def test_boundary_point_examples(small_table):
    f = boundary_point(small_table, 0.0)
    assert f.position == pytest.approx((0.3, 0.0), abs=1e-15)
    assert f.curvature == pytest.approx(1 / 0.3, rel=1e-15)
    f = boundary_point(small_table, 2 * math.pi * 0.3)
    assert f.position == pytest.approx((0.7, 0.5), abs=1e-12)
    assert f.curvature == 5.0
    f0 = boundary_point(small_table, 0.0)
    fp = boundary_point(small_table, small_table.total_perimeter)
    assert fp.position == pytest.approx(f0.position, abs=1e-12)
    assert fp.scatterer == f0.scatterer


def test_boundary_frame_orthonormal_and_periodic(table):
    rng = np.random.default_rng(5)
    for r in rng.uniform(0, table.total_perimeter, 50):
        f = boundary_point(table, r)
        g = boundary_point(table, r + 3 * table.total_perimeter)
        t, n = np.array(f.unit_tangent), np.array(f.inward_normal)
        assert abs(t @ n) < 1e-14
        assert np.linalg.norm(t) == pytest.approx(1.0)
        assert np.linalg.norm(n) == pytest.approx(1.0)
        # counterclockwise: tangent is the normal rotated by +90 degrees
        assert t == pytest.approx((-n[1], n[0]))
        assert f.curvature == 1.0 / table.radii[f.scatterer]
        assert g.position == pytest.approx(f.position, abs=1e-9)


def test_reference_angle_shifts_origin():
    t = build_table(SMALL_SPECS, ref_angles=[math.pi / 2, 0.0])
    assert boundary_point(t, 0.0).position == pytest.approx((0.0, 0.3), abs=1e-15)


def _brute_flights(specs, n_starts, n_dirs, span=6):
    """Free paths from a start grid on every scatterer, by scanning translates."""
    out = []
    for (cx, cy), R in specs:
        th = (np.arange(n_starts) + 0.5) / n_starts * 2 * np.pi
        px, py = cx + R * np.cos(th), cy + R * np.sin(th)
        a = (np.arange(n_dirs) + 0.5) / n_dirs * np.pi - np.pi / 2
        ang = th[:, None] + a[None, :]
        vx, vy = np.cos(ang), np.sin(ang)
        best = np.full(ang.shape, np.inf)
        for (qx, qy), Q in specs:
            for ox in range(-span, span + 1):
                for oy in range(-span, span + 1):
                    dx = (qx + ox - px)[:, None]
                    dy = (qy + oy - py)[:, None]
                    b = dx * vx + dy * vy
                    disc = b * b - (dx * dx + dy * dy - Q * Q)
                    s = b - np.sqrt(np.where(disc >= 0, disc, np.nan))
                    s = np.where((disc >= 0) & (s > 1e-9), s, np.inf)
                    best = np.minimum(best, s)
        out.append(best.ravel())
    return np.concatenate(out)


def test_default_table_finite_horizon(table):
    rep = verify_table(table)
    assert rep.finite_horizon
    assert rep.corridors == []
    assert 0 < rep.tau_min < rep.tau_max < 5
    # independent brute-force sampler on a different grid
    tau = _brute_flights(DEFAULT_SPECS, 200, 100)
    assert np.all(np.isfinite(tau))
    assert tau.max() < 5
    assert 0.8 * rep.tau_max < tau.max() <= rep.tau_max + 0.05
    # the shortest flight is the head-on diagonal bounce
    assert rep.tau_min == pytest.approx(math.sqrt(0.5) - 0.6, abs=2e-3)
    assert rep.tau_min >= math.sqrt(0.5) - 0.6 - 1e-12


def test_single_disk_infinite_horizon():
    t = build_table([((0, 0), 0.3)])
    rep = verify_table(t, n_directions=100, n_starts=200)
    assert not rep.finite_horizon
    assert any(c.direction in ((1, 0), (0, 1)) for c in rep.corridors)
    with pytest.raises(HorizonViolation) as exc:
        rep.raise_if_infinite()
    assert exc.value.start is not None


def test_small_table_has_diagonal_corridor(small_table):
    cs = corridors(small_table)
    assert cs
    diag = [c for c in cs if abs(c.direction[0]) == abs(c.direction[1]) == 1]
    # every center sits on a diagonal line; lines are 1/sqrt(2) apart and
    # blocked to half-width 0.3 by the larger disk
    assert diag
    assert max(c.width for c in diag) == pytest.approx(1 / math.sqrt(2) - 0.6, abs=1e-12)


@pytest.mark.parametrize("kw", [{"n_directions": 0}, {"n_starts": 0}])
def test_verify_table_rejects_zero_counts(table, kw):
    with pytest.raises(ValueError):
        verify_table(table, **kw)
