"""Holes, survival sets and Monte Carlo conditional evolution.

A particle is removed as soon as one of its collision points ``x_0, ..., x_n``
lies in the hole, so the survivors at step ``n`` sample ``M_t^n`` and the
conditional means over survivors estimate ``(L_t^n mu0)(phi)``.

Statistics are kept per batch (particles are split into ``N_BATCHES`` groups
of consecutive indices within each chunk) so that errors come from a
delete-one-batch jackknife. Reductions always run in chunk order, so results
depend only on the seed and particle count.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .billiard_map import step_arrays
from .errors import Extinction, HoleSpansScatterers, NonStationary
from .geometry import Table
from .observables import Observable, const

CHUNK = 1 << 16
N_BATCHES = 64
GRAZE_TOL = 1e-12
T_MAX = 0.1


@dataclass(frozen=True)
class Hole:
    center: float
    size: float
    arc_halfwidth: float
    scatterer: int

    @property
    def lo(self) -> float:
        return self.center - self.arc_halfwidth

    @property
    def hi(self) -> float:
        return self.center + self.arc_halfwidth

    def contains(self, r):
        """Closed-interval membership; an empty hole (t = 0) contains nothing."""
        if self.size == 0:
            return np.zeros(np.shape(r), bool) if np.ndim(r) else False
        return (np.asarray(r) >= self.lo) & (np.asarray(r) <= self.hi)


def make_hole(table: Table, r_star: float, t: float, t_max: float = T_MAX) -> Hole:
    """Vertical strip ``[r* - t|dD|/2, r* + t|dD|/2]`` of mu0-mass ``t``."""
    if not 0.0 <= t <= t_max:
        raise ValueError(f"hole size t={t} outside [0, {t_max}]")
    if not 0.0 <= r_star < table.total_perimeter:
        raise ValueError(f"r_star={r_star} outside [0, |dD|)")
    half = 0.5 * t * table.total_perimeter
    j = int(table.scatterer_of(r_star))
    cum = table.cumulative_arclength
    if r_star - half < cum[j] or r_star + half > cum[j + 1]:
        raise HoleSpansScatterers(
            f"hole [{r_star - half:.6g}, {r_star + half:.6g}] leaves scatterer {j} "
            f"arc [{cum[j]:.6g}, {cum[j + 1]:.6g}]")
    return Hole(center=float(r_star), size=float(t), arc_halfwidth=half, scatterer=j)


@dataclass
class Ensemble:
    r: np.ndarray
    phi: np.ndarray
    alive: np.ndarray
    rng_seed: int

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    key = np.array([seed, chunk], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_mu0(table: Table, seed: int, chunk: int, m: int):
    rng = _chunk_rng(seed, chunk)
    u = rng.random((2, m))
    r = u[0] * table.total_perimeter
    phi = np.arcsin(2.0 * u[1] - 1.0)
    return r, phi


def sample_mu0(table: Table, n: int, seed: int) -> Ensemble:
    """``n`` i.i.d. draws from mu0: ``r`` uniform, ``phi = arcsin(2u - 1)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    rs, ps = [], []
    for c, lo in enumerate(range(0, n, CHUNK)):
        r, p = _draw_mu0(table, seed, c, min(CHUNK, n - lo))
        rs.append(r)
        ps.append(p)
    r, phi = np.concatenate(rs), np.concatenate(ps)
    return Ensemble(r, phi, np.ones(n, bool), seed)


def sample_Dt(table: Table, hole: Hole, n: int, seed: int) -> Ensemble:
    """Draws from ``D_t``: uniform ``r`` in the hole, ``phi ~ cos/2``, then one step of F."""
    if hole.size <= 0:
        raise ValueError("sample_Dt needs t > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    rs, ps = [], []
    for c, lo in enumerate(range(0, n, CHUNK)):
        rng = _chunk_rng(seed, c)
        u = rng.random((2, min(CHUNK, n - lo)))
        rs.append(hole.lo + u[0] * (hole.hi - hole.lo))
        ps.append(np.arcsin(2.0 * u[1] - 1.0))
    st = step_arrays(table, np.concatenate(rs), np.concatenate(ps), graze_tol=GRAZE_TOL)
    alive = st.status == _kernels.OK
    return Ensemble(np.where(alive, st.r1, 0.0), np.where(alive, st.phi1, 0.0), alive, seed)


# ---------------------------------------------------------------------------
# batched simulation


@dataclass
class SurvivalTrace:
    """Per-batch survival counts and observable sums for one hole.

    ``counts[k, b]`` is the number of batch-``b`` particles alive after the
    check at step ``k``; ``sums[i, k, b]`` sums observable ``i`` over them.
    ``closed_counts`` and ``closed_sums`` are the same quantities without
    the hole (same particles), used as a control variate.
    """

    t: float
    r_star: float
    observables: list
    counts: np.ndarray
    sums: np.ndarray
    closed_counts: np.ndarray
    closed_sums: np.ndarray
    n_particles: int
    seed: Optional[int] = None
    grazing_killed: int = 0

    @property
    def n_steps(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def survivors(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def p(self) -> np.ndarray:
        return self.survivors / self.n_particles

    def _index(self, obs) -> int:
        name = obs.name if isinstance(obs, Observable) else obs
        return [o.name for o in self.observables].index(name)

    def means(self, obs) -> np.ndarray:
        i = self._index(obs)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.sums[i].sum(axis=1) / self.survivors

    def _jack(self, fn):
        """Value of ``fn(counts, sums, ccounts, csums)`` and its jackknife stderr."""
        tot = (self.counts.sum(-1), self.sums.sum(-1), self.closed_counts.sum(-1),
               self.closed_sums.sum(-1))
        full = fn(*tot)
        B = self.counts.shape[-1]
        reps = []
        for b in range(B):
            loo = (tot[0] - self.counts[..., b], tot[1] - self.sums[..., b],
                   tot[2] - self.closed_counts[..., b], tot[3] - self.closed_sums[..., b])
            reps.append(fn(*loo))
        reps = np.array(reps)
        se = np.sqrt((B - 1) / B * ((reps - reps.mean(axis=0)) ** 2).sum(axis=0))
        return full, se

    def mean_stderrs(self, obs) -> np.ndarray:
        i = self._index(obs)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._jack(lambda A, S, A0, S0: S[i] / A)[1]

    def rows(self):
        header = ["step", "survivors", "p_n"]
        for o in self.observables:
            header += [f"mean_{o.name}", f"stderr_{o.name}"]
        cols = [np.arange(self.n_steps + 1), self.survivors, self.p]
        for o in self.observables:
            cols += [self.means(o), self.mean_stderrs(o)]
        return header, list(zip(*cols))

    def to_csv(self, path):
        header, rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v)) if not np.isfinite(v) else format(float(v), ".17g")


def simulate(table: Table, holes: Sequence[Hole], n_steps: int,
             observables: Sequence[Observable], n_particles: int, seed: int,
             source=None, grazing_tol: float = GRAZE_TOL) -> list:
    """Evolve mu0-distributed particles once and record a trace for every hole.

    All holes see the same particles (common random numbers). ``source`` may
    replace mu0 by a callable ``(chunk, m) -> (r, phi, alive)``.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    observables = list(observables)
    H, K, B, O = len(holes), n_steps + 1, N_BATCHES, len(observables)
    counts = np.zeros((H, K, B), np.int64)
    sums = np.zeros((H, O, K, B))
    ccounts = np.zeros((K, B), np.int64)
    csums = np.zeros((O, K, B))
    grazed = 0
    per_batch = CHUNK // B
    for c, lo in enumerate(range(0, n_particles, CHUNK)):
        m = min(CHUNK, n_particles - lo)
        if source is None:
            r, phi = _draw_mu0(table, seed, c, m)
            valid = np.ones(m, bool)
        else:
            r, phi, valid = source(c, m)
        pad = CHUNK - m
        if pad:
            r = np.concatenate([r, np.zeros(pad)])
            phi = np.concatenate([phi, np.zeros(pad)])
            valid = np.concatenate([valid, np.zeros(pad, bool)])
        alive = np.repeat(valid[None, :], H, axis=0)
        ok = valid.copy()
        for k in range(K):
            vals = [np.where(ok, o(table, r, phi), 0.0) for o in observables]
            ccounts[k] += ok.reshape(B, per_batch).sum(axis=1)
            for i, v in enumerate(vals):
                csums[i, k] += v.reshape(B, per_batch).sum(axis=1)
            for h, hole in enumerate(holes):
                alive[h] &= ok & ~hole.contains(r)
                counts[h, k] += alive[h].reshape(B, per_batch).sum(axis=1)
                for i, v in enumerate(vals):
                    sums[h, i, k] += np.where(alive[h], v, 0.0).reshape(B, per_batch).sum(axis=1)
            if k == K - 1:
                break
            st = step_arrays(table, r, phi, graze_tol=grazing_tol)
            bad = ok & (st.status != _kernels.OK)
            grazed += int(bad.sum())
            ok &= ~bad
            r = np.where(ok, st.r1, 0.0)
            phi = np.where(ok, st.phi1, 0.0)
    return [SurvivalTrace(t=h.size, r_star=h.center, observables=observables,
                          counts=counts[i], sums=sums[i], closed_counts=ccounts,
                          closed_sums=csums, n_particles=n_particles, seed=seed,
                          grazing_killed=grazed)
            for i, h in enumerate(holes)]


def evolve_open(ensemble: Ensemble, table: Table, hole: Hole, n_steps: int,
                observables: Sequence[Observable]) -> SurvivalTrace:
    """Conditional evolution of an explicit ensemble."""
    if not ensemble.alive.any():
        raise Extinction("ensemble has no live particles")

    def source(c, m):
        lo = c * CHUNK
        return (ensemble.r[lo:lo + m], ensemble.phi[lo:lo + m],
                ensemble.alive[lo:lo + m])

    tr = simulate(table, [hole], n_steps, observables, ensemble.n, ensemble.rng_seed,
                  source=source)[0]
    if tr.survivors[-1] == 0:
        k = int(np.argmax(tr.survivors == 0))
        raise Extinction(f"no survivors left at step {k}")
    return tr


# ---------------------------------------------------------------------------
# estimators


def window(n_steps: int) -> np.ndarray:
    """Trailing plateau window: the last ceil(n_steps/3) steps."""
    w = max(1, math.ceil(n_steps / 3))
    return np.arange(n_steps + 1 - w, n_steps + 1)


def _trend(y: np.ndarray, x: np.ndarray) -> float:
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum()) if x.size > 1 else 0.0


@dataclass
class MuEstimate:
    value: float
    stderr: float
    diff: float
    diff_stderr: float
    trend: float
    trend_stderr: float
    window: tuple
    min_survivors: int
    stationary: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__, window=list(self.window))


def mu_t_from_trace(trace: SurvivalTrace, observable, strict: bool = True) -> MuEstimate:
    """Plateau average of the conditional means.

    ``diff`` is the window average of (conditional mean - closed mean over the
    same particles); its expectation is ``mu_t(phi) - mu0(phi)`` up to the
    plateau error, with far smaller variance than ``value - mu0(phi)``.
    """
    if trace.survivors[-1] == 0:
        raise Extinction("no survivors at the final step")
    i = trace._index(observable)
    w = window(trace.n_steps)
    x = w.astype(float)

    def stats(A, S, A0, S0):
        cond = S[i][w] / A[w]
        diff = cond - S0[i][w] / A0[w]
        return np.array([cond.mean(), diff.mean(), _trend(cond, x)])

    full, se = trace._jack(stats)
    est = MuEstimate(value=float(full[0]), stderr=float(se[0]), diff=float(full[1]),
                     diff_stderr=float(se[1]), trend=float(full[2]),
                     trend_stderr=float(se[2]), window=(int(w[0]), int(w[-1])),
                     min_survivors=int(trace.survivors[w].min()))
    est.stationary = bool(abs(est.trend) <= 3.0 * est.trend_stderr or est.trend == 0.0)
    if strict and not est.stationary:
        raise NonStationary(f"trend {est.trend:.3g} exceeds 3x its stderr {est.trend_stderr:.3g}")
    return est


def estimate_mu_t(table: Table, hole: Hole, observable: Observable, n_particles: int,
                  n_steps: int, seed: int, strict: bool = True) -> MuEstimate:
    tr = simulate(table, [hole], n_steps, [observable], n_particles, seed)[0]
    return mu_t_from_trace(tr, observable, strict)


@dataclass
class EscapeRate:
    rate: float
    ci: tuple
    stderr: float


def escape_rate(trace: SurvivalTrace, z: float = 1.96) -> EscapeRate:
    """Minus the slope of ``log p_n`` over the trailing window, per collision."""
    w = window(trace.n_steps)
    if w.size < 10:
        raise ValueError("escape_rate needs at least 10 plateau steps")
    if trace.survivors[w].min() == 0:
        raise Extinction("survival reached zero inside the plateau window")
    x = w.astype(float)

    def slope(A, S, A0, S0):
        return -_trend(np.log(A[w].astype(float)), x)

    val, se = trace._jack(slope)
    if np.all(trace.counts[w] == trace.counts[w[0]]):
        val, se = 0.0, 0.0
    val, se = float(val), float(se)
    return EscapeRate(val, (val - z * se, val + z * se), se)


def survival_constant(trace: SurvivalTrace) -> float:
    """Smallest ``C`` with ``p_n >= (1 - C t)^n`` for every ``n >= 1`` of the trace."""
    if trace.t <= 0:
        return 0.0
    n = np.arange(1, trace.n_steps + 1)
    p = trace.p[1:]
    if np.any(p <= 0):
        raise Extinction("zero survival in trace")
    return float(np.max((1.0 - p ** (1.0 / n)) / trace.t))


def closed_drift(trace: SurvivalTrace, observable, steps: Sequence[int]) -> dict:
    """``mean(phi o F^n) - mean(phi)`` over all particles, with jackknife stderr."""
    i = trace._index(observable)
    out = {}
    for n in steps:
        full, se = trace._jack(lambda A, S, A0, S0: S0[i][n] / A0[n] - S0[i][0] / A0[0])
        out[int(n)] = (float(full), float(se))
    return out


def closed_mean(trace: SurvivalTrace, observable, step: int):
    i = trace._index(observable)
    full, se = trace._jack(lambda A, S, A0, S0: S0[i][step] / A0[step])
    return float(full), float(se)


@dataclass
class TelescopingRow:
    k: int
    delta: float
    stderr: float
    ratio: float
    independence: float
    above_floor: bool


def telescoping_rows(trace: SurvivalTrace, observable) -> list:
    """``Delta_k = |L^{k+1} mu0(phi) - L^k mu0(phi)|`` and the independence ratio.

    Differences use the closed control variate on both levels, which cancels
    most of the Monte Carlo noise shared by consecutive steps. The ratio
    ``(p_k - p_{k+1}) / (t p_k)`` estimates ``mu0(F(H_t) cap M^k)/(t mu0(M^k))``
    up to the one-step shift of the hole.
    """
    i = trace._index(observable)
    K = trace.n_steps

    def d(A, S, A0, S0):
        v = S[i] / A - S0[i] / A0
        return v[1:] - v[:-1]

    with np.errstate(invalid="ignore", divide="ignore"):
        full, se = trace._jack(d)
    p = trace.p
    rows = []
    for k in range(K):
        delta = abs(float(full[k]))
        ind = float((p[k] - p[k + 1]) / (trace.t * p[k])) if trace.t > 0 and p[k] > 0 else 0.0
        rows.append(TelescopingRow(k, delta, float(se[k]), delta / trace.t if trace.t else 0.0,
                                   ind, bool(delta > 3.0 * se[k])))
    return rows
