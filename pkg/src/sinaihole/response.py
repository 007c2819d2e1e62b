"""Both sides of the linear response formula for the conditionally invariant measure.

Series side: ``sum_k [mu0(phi) - 1/2 int phi(F^k(r*, s)) cos s ds]``, each
line integral computed by an equal-weight rule in ``u = (1 + sin s)/2`` so
that ``cos s ds / 2`` becomes ``du``.

Monte Carlo side: ``(mu_t(phi) - mu0(phi))/t`` for several ``t`` and a linear
extrapolation of these slopes to ``t = 0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .billiard_map import step_arrays
from .errors import NoDecay
from .geometry import Table
from .observables import Observable
from .open_system import (Hole, _chunk_rng, make_hole, mu_t_from_trace, simulate, window,
                          telescoping_rows)

GRAZE_MARGIN = 1e-9
K_MAX = 40
N_PHI_NODES = 1 << 20


def _mu0_rule(table: Table, observable: Observable, n_r: int, n_phi: int) -> float:
    P = table.total_perimeter
    r = (np.arange(n_r) + 0.5) * P / n_r
    x, w = np.polynomial.legendre.leggauss(n_phi)
    phi = 0.5 * math.pi * x
    wphi = 0.5 * math.pi * w * np.cos(phi)
    f = observable(table, r[:, None], phi[None, :])
    return float((f * wphi[None, :]).sum() * (P / n_r) / (2.0 * P))


def mu0_expectation(table: Table, observable: Observable, n_r_nodes: int = 512,
                    n_phi_nodes: int = 64):
    """``mu0(phi)`` by midpoint rule in ``r`` times Gauss-Legendre in ``phi``.

    Returns ``(value, error_estimate)``; the value uses doubled node counts and
    the estimate is its difference from the base rule.
    """
    if n_r_nodes < 16 or n_phi_nodes < 16:
        raise ValueError("node counts must be >= 16")
    q1 = _mu0_rule(table, observable, n_r_nodes, n_phi_nodes)
    q2 = _mu0_rule(table, observable, 2 * n_r_nodes, 2 * n_phi_nodes)
    return q2, abs(q2 - q1)


@dataclass
class SeriesTerm:
    k: int
    mu0_part: float
    line_part: float
    term: float
    quad_error_estimate: float
    skipped: int = 0


class _LineOrbit:
    """Orbit of the vertical fibre ``{r*} x (-pi/2, pi/2)`` on an equal-mass grid."""

    def __init__(self, table: Table, r_star: float, n: int):
        if n < 2 or n % 2:
            raise ValueError("n_phi_nodes must be even and >= 2")
        self.table = table
        u = (np.arange(n) + 0.5) / n
        self.phi = np.arcsin(2.0 * u - 1.0)
        self.r = np.full(n, float(r_star))
        self.ok = np.ones(n, bool)
        self.k = 0

    def advance(self):
        st = step_arrays(self.table, self.r, self.phi, graze_tol=GRAZE_MARGIN)
        self.ok &= st.status == _kernels.OK
        self.r = np.where(self.ok, st.r1, self.r)
        self.phi = np.where(self.ok, st.phi1, 0.0)
        self.k += 1

    def line_part(self, observable: Observable):
        """Mean over surviving nodes and an even/odd subgrid error estimate."""
        f = observable(self.table, self.r, self.phi)
        ok = self.ok
        ev, od = ok[0::2], ok[1::2]
        val = float(f[ok].mean())
        e = float(f[0::2][ev].mean()) if ev.any() else val
        o = float(f[1::2][od].mean()) if od.any() else val
        return val, 0.5 * abs(e - o), int((~ok).sum())


def series_term(table: Table, r_star: float, observable: Observable, k: int,
                n_phi_nodes: int = N_PHI_NODES, mu0_value: Optional[float] = None) -> SeriesTerm:
    if k < 0:
        raise ValueError("k must be >= 0")
    if mu0_value is None:
        mu0_value = mu0_expectation(table, observable)[0]
    line = _LineOrbit(table, r_star, n_phi_nodes)
    for _ in range(k):
        line.advance()
    lp, err, skipped = line.line_part(observable)
    return SeriesTerm(k, mu0_value, lp, mu0_value - lp, err, skipped)


def _geometric_fit(ks, terms):
    """Least squares ``log|term| = a + k log(gamma)``; returns (gamma, a, r2)."""
    y = np.log(np.maximum(np.abs(np.asarray(terms, float)), 1e-300))
    x = np.asarray(ks, float)
    slope, icpt = np.polyfit(x, y, 1)
    pred = icpt + slope * x
    ss = ((y - y.mean()) ** 2).sum()
    r2 = float(1.0 - ((y - pred) ** 2).sum() / ss) if ss > 0 else 1.0
    return float(math.exp(slope)), float(icpt), r2


@dataclass
class Slope:
    t: float
    slope: float
    stderr: float
    unpaired_slope: float
    unpaired_stderr: float
    min_survivors: int


@dataclass
class ResponseReport:
    observable: str
    r_star: float
    terms: list = field(default_factory=list)
    K: int = 0
    series_value: float = float("nan")
    tail_bound: float = float("nan")
    quad_error: float = float("nan")
    decay_rate: float = float("nan")
    warning: Optional[str] = None
    slopes: list = field(default_factory=list)
    richardson_value: float = float("nan")
    richardson_stderr: float = float("nan")
    fit_residual: float = float("nan")
    combined_error: float = float("nan")
    verdict: Optional[str] = None

    @property
    def partial_sums(self) -> list:
        return list(np.cumsum([t.term for t in self.terms]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partial_sums"] = [float(v) for v in self.partial_sums]
        return d


def response_series(table: Table, r_star: float, observable: Observable,
                    tail_tol: float = 1e-3, K_max: int = K_MAX,
                    n_phi_nodes: int = N_PHI_NODES, strict: bool = True,
                    n_r_nodes: int = 512) -> ResponseReport:
    """Sum the series until a geometric fit of the last 5 terms bounds the tail by ``tail_tol``."""
    if not tail_tol >= 0:
        raise ValueError("tail_tol must be >= 0")
    mu0_value, mu0_err = mu0_expectation(table, observable, n_r_nodes=n_r_nodes)
    rep = ResponseReport(observable=observable.name, r_star=float(r_star))
    line = _LineOrbit(table, r_star, n_phi_nodes)
    certified = False
    tail = math.inf
    for k in range(K_max + 1):
        if k:
            line.advance()
        lp, err, skipped = line.line_part(observable)
        rep.terms.append(SeriesTerm(k, mu0_value, lp, mu0_value - lp, err + mu0_err, skipped))
        if k >= 5:
            last = np.array([t.term for t in rep.terms[-5:]])
            if np.all(np.abs(last) < 1e-14):
                tail, gamma = 0.0, 0.0
            else:
                gamma, a, _ = _geometric_fit(range(k - 4, k + 1), last)
                tail = math.exp(a) * gamma ** (k + 1) / (1 - gamma) if gamma < 1 else math.inf
            if tail < tail_tol:
                certified = True
                rep.decay_rate = gamma
                break
    rep.K = len(rep.terms) - 1
    rep.series_value = float(sum(t.term for t in rep.terms))
    rep.quad_error = float(math.sqrt(sum(t.quad_error_estimate ** 2 for t in rep.terms)))
    if not certified:
        ks = [t.k for t in rep.terms[1:]]
        gamma, _, _ = _geometric_fit(ks, [t.term for t in rep.terms[1:]]) if len(ks) > 1 else (1.0, 0, 0)
        rep.decay_rate = gamma
        if gamma >= 1.0 and not all(abs(t.term) < 1e-14 for t in rep.terms):
            if strict:
                raise NoDecay(f"series terms show no geometric decay up to K={K_max}")
        rep.warning = (f"tail bound {tail:.3g} not below tail_tol={tail_tol:g} "
                       f"at K_max={K_max}")
        warnings.warn(rep.warning, RuntimeWarning, stacklevel=2)
        # bound the tail with the decay fitted over all terms
        last = abs(rep.terms[-1].term)
        tail = last * gamma / (1 - gamma) if gamma < 1 else math.inf
    rep.tail_bound = float(tail)
    return rep


def _slopes_from_traces(traces, observable, mu0_value):
    out = []
    for tr in traces:
        est = mu_t_from_trace(tr, observable)
        out.append(Slope(t=tr.t, slope=est.diff / tr.t, stderr=est.diff_stderr / tr.t,
                         unpaired_slope=(est.value - mu0_value) / tr.t,
                         unpaired_stderr=est.stderr / tr.t,
                         min_survivors=est.min_survivors))
    return out


def _richardson(ts, slopes):
    """Intercept of the least-squares line ``slope = A + B t`` and its max residual."""
    ts = np.asarray(ts, float)
    slopes = np.asarray(slopes, float)
    if ts.size == 2:
        B = (slopes[0] - slopes[1]) / (ts[0] - ts[1])
        A = slopes[1] - B * ts[1]
        return float(A), 0.0
    B, A = np.polyfit(ts, slopes, 1)
    return float(A), float(np.max(np.abs(slopes - (A + B * ts))))


def finite_difference_derivative(table: Table, r_star: float, observable: Observable,
                                 t_list: Sequence[float], n_particles: int = 10 ** 6,
                                 n_steps: int = 60, seed: int = 0,
                                 report: Optional[ResponseReport] = None) -> ResponseReport:
    """Finite-difference slopes for each ``t`` and their extrapolation to ``t = 0``.

    All ``t`` share the same particles, so the extrapolated value gets its
    stderr from one jackknife over batches of the whole pipeline.
    """
    t_list = [float(t) for t in t_list]
    if len(t_list) < 2 or any(a <= b for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must hold >= 2 strictly decreasing values")
    if min(t_list) <= 0:
        raise ValueError("t values must be positive")
    holes = [make_hole(table, r_star, t) for t in t_list]
    traces = simulate(table, holes, n_steps, [observable], n_particles, seed)
    mu0_value = mu0_expectation(table, observable)[0]
    rep = report or ResponseReport(observable=observable.name, r_star=float(r_star))
    rep.slopes = _slopes_from_traces(traces, observable, mu0_value)
    A, resid = _richardson(t_list, [s.slope for s in rep.slopes])

    i = 0
    w = window(n_steps)

    def intercept(*per_trace):
        vals = []
        for (Ac, S, A0, S0), t in zip(per_trace, t_list):
            vals.append(np.mean(S[i][w] / Ac[w] - S0[i][w] / A0[w]) / t)
        return _richardson(t_list, vals)[0]

    B = traces[0].counts.shape[-1]
    tot = [(tr.counts.sum(-1), tr.sums.sum(-1), tr.closed_counts.sum(-1), tr.closed_sums.sum(-1))
           for tr in traces]
    reps = []
    for b in range(B):
        loo = [(T[0] - tr.counts[..., b], T[1] - tr.sums[..., b],
                T[2] - tr.closed_counts[..., b], T[3] - tr.closed_sums[..., b])
               for T, tr in zip(tot, traces)]
        reps.append(intercept(*loo))
    reps = np.array(reps)
    rep.richardson_value = A
    rep.richardson_stderr = float(np.sqrt((B - 1) / B * ((reps - reps.mean()) ** 2).sum()))
    rep.fit_residual = resid
    return rep


def compare(rep: ResponseReport, factor: float = 3.0) -> ResponseReport:
    """Fill ``combined_error`` and ``verdict`` once both sides are present."""
    tail = rep.tail_bound if math.isfinite(rep.tail_bound) else math.inf
    rep.combined_error = float(rep.richardson_stderr + rep.fit_residual + tail + rep.quad_error)
    diff = abs(rep.richardson_value - rep.series_value)
    if not math.isfinite(rep.combined_error):
        # an unbounded tail certifies nothing
        rep.verdict = "INCONCLUSIVE"
    else:
        rep.verdict = "PASS" if diff <= factor * rep.combined_error else "FAIL"
    return rep


def linear_response(table: Table, r_star: float, observable: Observable,
                    t_list: Sequence[float] = (0.04, 0.02, 0.01), tail_tol: float = 1e-3,
                    K_max: int = K_MAX, n_phi_nodes: int = N_PHI_NODES,
                    n_particles: int = 10 ** 6, n_steps: int = 60, seed: int = 0) -> ResponseReport:
    """Series value, extrapolated slope and verdict in one report."""
    rep = response_series(table, r_star, observable, tail_tol, K_max, n_phi_nodes)
    finite_difference_derivative(table, r_star, observable, t_list, n_particles, n_steps,
                                 seed, report=rep)
    return compare(rep)


# ---------------------------------------------------------------------------
# telescoping diagnostic


@dataclass
class DecayTable:
    t: float
    observable: str
    rows: list
    gamma: float
    fit_r2: float
    n_fit: int
    k0_ratio: float
    k0_bound: float
    self_intersection: float

    def to_dict(self) -> dict:
        return asdict(self)


def hole_return_fraction(table: Table, hole: Hole, k_max: int, n: int, seed: int) -> float:
    """Estimate ``mu0(H_t cap union_{1<=k<=k_max} F^{-k} H_t) / t``."""
    rng = _chunk_rng(seed, 1 << 40)
    r = hole.lo + rng.random(n) * (hole.hi - hole.lo)
    phi = np.arcsin(2.0 * rng.random(n) - 1.0)
    ok = np.ones(n, bool)
    back = np.zeros(n, bool)
    for _ in range(k_max):
        st = step_arrays(table, r, phi, graze_tol=1e-12)
        ok &= st.status == _kernels.OK
        r, phi = np.where(ok, st.r1, 0.0), np.where(ok, st.phi1, 0.0)
        back |= ok & hole.contains(r)
    return float(back.mean())


def telescoping_diagnostic(table: Table, hole: Hole, observable: Observable, k_max: int = 30,
                           n_particles: int = 10 ** 6, seed: int = 0) -> DecayTable:
    """``Delta_k / t`` with a geometric fit over the leading run above the noise floor."""
    if hole.size <= 0:
        raise ValueError("telescoping_diagnostic needs t > 0")
    tr = simulate(table, [hole], k_max + 1, [observable], n_particles, seed)[0]
    rows = telescoping_rows(tr, observable)[: k_max + 1]
    run = 0
    while run < len(rows) and rows[run].above_floor:
        run += 1
    if run >= 2:
        gamma, _, r2 = _geometric_fit([r.k for r in rows[:run]], [r.ratio for r in rows[:run]])
    else:
        gamma, r2 = float("nan"), float("nan")
    return DecayTable(t=hole.size, observable=observable.name, rows=rows, gamma=gamma,
                      fit_r2=r2, n_fit=run, k0_ratio=rows[0].ratio,
                      k0_bound=4.0 * observable.sup_norm,
                      self_intersection=hole_return_fraction(table, hole, k_max,
                                                             min(n_particles, 10 ** 5), seed))
