import math

import numpy as np
import pytest

from sinaihole.billiard_map import PhasePoint, billiard_map, inverse_map, step_arrays
from sinaihole.errors import MassExtinct
from sinaihole.families import (FamilyParams, Mode, boundary_Z, cone_violations,
                                evolve_family, family_measure, hole_mass, holder_constant,
                                mixing_diagnostic, pair_lengths, regularity_report,
                                resample_stderr, vertical_line_family)
from sinaihole.observables import COS_R, SIN_PHI, const
from sinaihole.open_system import make_hole
from sinaihole.response import series_term

ONE = const()
FINE = 1 << 18


@pytest.fixture(scope="module")
def line(table):
    return vertical_line_family(table, 0.5)


@pytest.fixture(scope="module")
def line2(table, line):
    return evolve_family(line, table)


def test_vertical_line_mass_retained(line):
    assert line.total_mass >= 1 - 1e-4
    lost = sum(line.dropped.values())
    assert line.total_mass + lost == pytest.approx(1.0, abs=1e-9)


def test_vertical_line_slopes(table, line):
    # image of {r*} x [-pi/2, pi/2]: d phi1 / d r1 = (tau kappa1 + cos phi1) / tau
    rng = np.random.default_rng(0)
    idx = line.pair_index()
    rc = line.canonical_r()
    pick = rng.choice(line.r.size, 300, replace=False)
    for i in pick:
        x1 = PhasePoint(float(rc[i]), float(line.phi[i]))
        if x1.grazing_margin < 1e-6:
            continue
        x0 = inverse_map(table, x1)
        d = (x0.r - 0.5) % table.total_perimeter
        assert min(d, table.total_perimeter - d) < 1e-9
        tau = billiard_map(table, x0).tau
        k1 = 1.0 / table.radii[line.scat[idx[i]]]
        expect = (tau * k1 + math.cos(x1.phi)) / tau
        assert line.s[i] == pytest.approx(expect, rel=1e-6)


def test_vertical_line_tau_in(table, line):
    rc = line.canonical_r()
    i = np.arange(0, line.r.size, 37)
    back = step_arrays(table, rc[i], -line.phi[i])
    assert np.allclose(back.tau, line.tau_in[i], rtol=0, atol=1e-9)


@pytest.mark.parametrize("obs,tol", [(COS_R, 2e-4), (SIN_PHI, 1e-4)])
def test_family_measure_matches_line_quadrature(table, line, obs, tol):
    ref = series_term(table, 0.5, obs, 1, n_phi_nodes=FINE).line_part
    assert abs(family_measure(line, obs) - ref) < tol


def test_one_step_matches_second_iterate(table, line2):
    ref = series_term(table, 0.5, COS_R, 2, n_phi_nodes=FINE).line_part
    assert abs(family_measure(line2, COS_R) - ref) < 2e-4


def test_hole_mass_matches_sampling(table, line):
    hole = make_hole(table, 0.5, 0.02)
    rng = np.random.default_rng(4)
    n = 10 ** 6
    out = step_arrays(table, np.full(n, 0.5), np.arcsin(2 * rng.random(n) - 1))
    inside = hole.contains(out.r1).astype(float)
    se = math.sqrt(inside.mean() * (1 - inside.mean()) / n)
    assert abs(hole_mass(line, hole) - inside.mean()) < 4 * se + 1e-6
    assert hole_mass(line, make_hole(table, 0.5, 0.0)) == 0.0


def test_closed_mass_conserved(line, line2):
    assert line2.history[-1]["pairs_before_resample"] == line2.n_pairs  # no resampling
    lost = sum(line2.dropped.values()) - sum(line.dropped.values())
    assert abs(line2.total_mass + lost - line.total_mass) < 1e-6
    assert abs(line2.total_mass - line.total_mass) < 1e-6


def test_leaky_step_normalized(table, line):
    hole = make_hole(table, 0.5, 0.01)
    start = vertical_line_family(table, 1.1)
    g = evolve_family(start, table, hole, Mode.LEAKY)
    assert g.total_mass == pytest.approx(1.0, abs=1e-12)
    assert family_measure(g, ONE) == pytest.approx(1.0, abs=1e-12)
    s = g.history[-1]["survival"]
    closed = evolve_family(start, table)
    assert s <= 1 - hole_mass(start, hole) + 1e-9
    # mass-floor and strip truncation losses are below 1e-6
    assert s >= 1 - hole_mass(start, hole) - hole_mass(closed, hole) - 1e-6


def test_leaky_extinction(table):
    fam = vertical_line_family(table, 0.5)
    fam.off = np.array([0])
    with pytest.raises(MassExtinct):
        evolve_family(fam, table, make_hole(table, 0.5, 0.01), Mode.LEAKY)


def test_boundary_Z_examples():
    assert boundary_Z([(1.0, 0.05)]) == pytest.approx(20.0)
    assert boundary_Z([(0.5, 0.1), (0.5, 0.2)]) == pytest.approx(7.5)


def test_holder_constant_negative_control():
    smooth, broken = [], []
    for n in (65, 257, 1025, 4097):
        x = np.linspace(0, 1, n)
        smooth.append(holder_constant(x, np.exp(x)))
        # a jump makes the constant grow like n^(1/3) under refinement
        broken.append(holder_constant(x, 1 + 0.5 * (x > 0.5003)))
    assert max(smooth) <= 1.0 + 1e-12
    assert all(a < b for a, b in zip(broken, broken[1:]))
    assert broken[-1] > 3 * broken[0]


def test_family_regularity(table, line, line2):
    for fam in (line, line2):
        assert cone_violations(fam) == 0
        assert np.all(pair_lengths(fam) <= fam.params.delta_star * (1 + 1e-9))
        rep = regularity_report(fam)
        assert math.isfinite(rep.Z) and math.isfinite(rep.varpi)
        assert rep.n_pairs == fam.n_pairs


def test_resampling_bounds_pairs(table, line2):
    params = FamilyParams(max_pairs=1000)
    g = evolve_family(line2, table, params=params, noise_observable=COS_R)
    assert g.n_pairs <= 1000 + 1 and g.resampled
    assert g.total_mass == pytest.approx(line2.total_mass, rel=1e-2)
    assert resample_stderr(g) > 0
    ref = family_measure(evolve_family(line2, table), COS_R)
    assert abs(family_measure(g, COS_R) - ref) < 5 * resample_stderr(g) + 1e-3


def test_identical_families_have_zero_distance(table, line):
    ds = mixing_diagnostic(line, line, table, None, 2, COS_R)
    assert ds.d == [0.0, 0.0, 0.0]
    assert ds.n_fit == 0 and math.isnan(ds.gamma)


def test_mixing_needs_replicates(table, line):
    with pytest.raises(ValueError):
        mixing_diagnostic(line, line, table, None, 2, COS_R, replicates=1)


@pytest.mark.parametrize("kw", [{"k_max_strip": 1}, {"k0": 1}, {"delta_star": 0.0}])
def test_family_params_validation(kw):
    with pytest.raises(ValueError):
        FamilyParams(**kw)


def test_family_csv(tmp_path, line):
    path = tmp_path / "fam.csv"
    line.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "pair,weight,r,phi,rho"
    assert len(rows) == line.r.size + 1
    w = {}
    for row in rows[1:]:
        j, ww = row.split(",")[:2]
        w[int(j)] = float(ww)
    assert sum(w.values()) == pytest.approx(1.0, abs=1e-12)
