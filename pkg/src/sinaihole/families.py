"""Standard pairs and families: unstable graph curves carrying densities.

A family is stored flat. Node ``i`` of pair ``j`` (``off[j] <= i < off[j+1]``)
holds arc-length ``r`` (unwrapped along the pair), the graph value ``phi``, its
slope ``s = dphi/dr``, the cumulative mass ``M`` from the left end and the
mass density ``rho = dM/dr``. Between nodes both ``phi`` and ``M`` are cubic
Hermite interpolants, so masses and integrals are consistent with the nodes.

Pushing a family maps every curve by F. Curves are first cut where the
image changes scatterer (singular curves), where the source or image angle
crosses a homogeneity strip boundary and, depending on the mode, where the
curve or its image crosses the hole edges. Cut points are located by
bisection, image curves are refined until their Hermite interpolants agree
with the map at interval midpoints, and long pieces are split.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .billiard_map import HALF_PI, step_arrays, wrap_dr
from .errors import MassExtinct
from .geometry import Table
from .observables import Observable

DELTA_STAR = 0.05
K0 = 10
K_MAX_STRIP = 200
MASS_FLOOR = 1e-10
MAX_PAIRS = 4000
HERMITE_TOL = 1e-9
MAX_ROUNDS = 60
GL3_X, GL3_W = np.polynomial.legendre.leggauss(3)


class Mode(str, enum.Enum):
    CLOSED = "closed"
    HATTED = "hatted"
    LEAKY = "leaky"


@dataclass
class FamilyParams:
    delta_star: float = DELTA_STAR
    k0: int = K0
    k_max_strip: int = K_MAX_STRIP
    mass_floor: float = MASS_FLOOR
    max_pairs: int = MAX_PAIRS
    seed: int = 0

    def __post_init__(self):
        if self.k0 < 2:
            raise ValueError("k0 must be >= 2")
        if self.k_max_strip < self.k0:
            raise ValueError("k_max_strip must be >= k0")
        if not self.delta_star > 0:
            raise ValueError("delta_star must be positive")


@dataclass
class StandardPair:
    r: np.ndarray
    phi: np.ndarray
    slope: np.ndarray
    rho: np.ndarray
    weight: float
    scatterer: int
    tau_in: np.ndarray

    @property
    def interval(self) -> tuple:
        return float(self.r[0]), float(self.r[-1])


@dataclass
class StandardFamily:
    table: Table
    r: np.ndarray
    phi: np.ndarray
    s: np.ndarray
    M: np.ndarray
    rho: np.ndarray
    tau_in: np.ndarray
    off: np.ndarray
    scat: np.ndarray
    mass: np.ndarray
    strip: np.ndarray
    mode: Mode = Mode.CLOSED
    generation: int = 0
    params: FamilyParams = field(default_factory=FamilyParams)
    dropped: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    resampled: bool = False

    @property
    def n_pairs(self) -> int:
        return self.off.size - 1

    @property
    def weights(self) -> np.ndarray:
        return self.mass / self.mass.sum()

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def pair(self, j: int) -> StandardPair:
        a, b = self.off[j], self.off[j + 1]
        m = self.mass[j]
        return StandardPair(self.r[a:b], self.phi[a:b], self.s[a:b], self.rho[a:b] / m,
                            float(self.weights[j]), int(self.scat[j]), self.tau_in[a:b])

    @property
    def pairs(self) -> list:
        return [self.pair(j) for j in range(self.n_pairs)]

    def pair_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_pairs), np.diff(self.off))

    def canonical_r(self, r=None, idx=None):
        r = self.r if r is None else r
        idx = self.pair_index() if idx is None else idx
        return self.table.canonical_r(r, self.scat[idx])

    def to_csv(self, path):
        idx = self.pair_index()
        w = self.weights[idx]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["pair", "weight", "r", "phi", "rho"])
            rc = self.canonical_r()
            for j, ww, a, b, c in zip(idx, w, rc, self.phi, self.rho / self.mass[idx]):
                out.writerow([int(j)] + [format(float(v), ".17g") for v in (ww, a, b, c)])


# ---------------------------------------------------------------------------
# cubic Hermite helpers


def _hermite(u0, u1, y0, y1, m0, m1, u):
    # zero-width intervals give nan here; callers mask them out
    h = u1 - u0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (u - u0) / h
        t2, t3 = t * t, t * t * t
        val = ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * h * m0
               + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * h * m1)
        der = ((6 * t2 - 6 * t) * y0 / h + (3 * t2 - 4 * t + 1) * m0
               + (-6 * t2 + 6 * t) * y1 / h + (3 * t2 - 2 * t) * m1)
    return val, der


# ---------------------------------------------------------------------------
# parent curves


class _Parents:
    """Curves to be pushed, evaluated at arbitrary parameters.

    Vertical curves use ``u = phi`` at fixed ``r`` with mass density
    ``cos(phi)/2``; graph curves use ``u = r`` (unwrapped).
    """

    def __init__(self, table, U, PHI, S, M, RHO, TAU, off, scat, vertical, r0):
        self.table = table
        self.U, self.PHI, self.S, self.M, self.RHO, self.TAU = U, PHI, S, M, RHO, TAU
        self.off, self.scat, self.vertical, self.r0 = off, scat, vertical, r0

    @classmethod
    def from_family(cls, fam: StandardFamily):
        n = fam.n_pairs
        return cls(fam.table, fam.r, fam.phi, fam.s, fam.M, fam.rho, fam.tau_in, fam.off,
                   fam.scat, np.zeros(n, bool), np.zeros(n))

    @classmethod
    def vertical_lines(cls, table, rs, n_nodes=65):
        rs = np.atleast_1d(np.asarray(rs, float))
        u = np.linspace(-HALF_PI, HALF_PI, n_nodes)
        U = np.tile(u, rs.size)
        off = np.arange(rs.size + 1) * n_nodes
        M = np.tile(0.5 * (np.sin(u) + 1.0), rs.size)
        scat = table.scatterer_of(rs).astype(np.int64)
        z = np.zeros_like(U)
        return cls(table, U, U.copy(), z, M, 0.5 * np.cos(U), np.full_like(U, np.nan), off,
                   scat, np.ones(rs.size, bool), rs)

    def eval(self, cid, iv, u):
        """``(r, phi, tr, tphi, M, dM)`` at parameter ``u`` in node interval ``iv``."""
        U = self.U
        u0, u1 = U[iv], U[iv + 1]
        phi_g, dphi_g = _hermite(u0, u1, self.PHI[iv], self.PHI[iv + 1], self.S[iv],
                                 self.S[iv + 1], u)
        M_g, dM_g = _hermite(u0, u1, self.M[iv], self.M[iv + 1], self.RHO[iv],
                             self.RHO[iv + 1], u)
        vert = self.vertical[cid]
        first = U[self.off[cid]]
        r = np.where(vert, self.r0[cid], u)
        phi = np.where(vert, u, phi_g)
        tr = np.where(vert, 0.0, 1.0)
        tphi = np.where(vert, 1.0, dphi_g)
        M = np.where(vert, 0.5 * (np.sin(u) - np.sin(first)), M_g)
        dM = np.where(vert, 0.5 * np.cos(u), dM_g)
        # exact node values where u hits a node
        at0 = u == u0
        at1 = u == u1
        phi = np.where(~vert & at0, self.PHI[iv], np.where(~vert & at1, self.PHI[iv + 1], phi))
        M = np.where(~vert & at0, self.M[iv], np.where(~vert & at1, self.M[iv + 1], M))
        return r, phi, tr, tphi, M, dM


# point attributes computed for every parameter value that enters a push
_FIELDS = ("cid", "iv", "u", "r", "phi", "tr", "tphi", "M", "dM", "r1", "phi1", "tau",
           "hit", "target", "k0", "k1", "src_in", "img_in", "dr1", "dphi1", "okr")


def _strip(phi, k0, kmax):
    m = HALF_PI - np.abs(phi)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.floor(np.where(m > 0, m, np.nan) ** -0.5)
    k = np.where(m > 1.0 / (k0 * k0), 0, np.where(m > 0, np.maximum(k, k0), kmax + 1))
    return np.minimum(np.nan_to_num(k, nan=kmax + 1), kmax + 1).astype(np.int64)


def _order(k, k0):
    # strip index as a monotone position in the margin
    return np.where(k == 0, k0 - 1, k)


class _Pusher:
    def __init__(self, parents: _Parents, hole, mode: Mode, params: FamilyParams):
        self.P = parents
        self.T = parents.table
        self.hole = hole if mode != Mode.CLOSED else None
        self.mode = mode
        self.prm = params
        hw = hole.hi - hole.lo if (hole is not None and hole.size > 0) else math.inf
        self.h_max = min(params.delta_star / 16.0, hw / 4.0)

    def points(self, cid, iv, u) -> dict:
        P, T, prm = self.P, self.T, self.prm
        r, phi, tr, tphi, M, dM = P.eval(cid, iv, u)
        rc = T.canonical_r(r, P.scat[cid])
        st = step_arrays(T, rc, phi, graze_tol=1e-12)
        ok = st.status == _kernels.OK
        # DF applied to the parent tangent
        k = 1.0 / T.radii[P.scat[cid]]
        k1 = 1.0 / T.radii[np.maximum(st.hit, 0)]
        c0, c1 = np.cos(phi), np.cos(st.phi1)
        sc = -1.0 / np.where(ok, c1, 1.0)
        tau = st.tau
        dr1 = sc * ((tau * k + c0) * tr + tau * tphi)
        dphi1 = sc * ((tau * k * k1 + k * c1 + k1 * c0) * tr + (tau * k1 + c1) * tphi)
        kk0 = _strip(phi, prm.k0, prm.k_max_strip)
        kk1 = np.where(ok, _strip(st.phi1, prm.k0, prm.k_max_strip), prm.k_max_strip + 1)
        if self.hole is not None and self.hole.size > 0:
            src_in = self.hole.contains(rc)
            img_in = ok & self.hole.contains(np.where(ok, st.r1, -1.0))
        else:
            src_in = img_in = np.zeros(u.size, bool)
        return dict(cid=cid, iv=iv, u=u, r=r, phi=phi, tr=tr, tphi=tphi, M=M, dM=dM,
                    r1=np.where(ok, st.r1, np.nan), phi1=np.where(ok, st.phi1, np.nan),
                    tau=tau, hit=st.hit, target=np.where(ok, st.target, -2), k0=kk0, k1=kk1,
                    src_in=src_in, img_in=img_in, dr1=dr1, dphi1=dphi1,
                    okr=np.zeros(u.size, bool))

    def run(self):
        P = self.P
        n = P.U.size
        cid = np.repeat(np.arange(P.off.size - 1), np.diff(P.off))
        iv = np.arange(n)
        last = P.off[1:] - 1
        iv[last] = last - 1
        pts = self.points(cid, iv, P.U.copy())
        unresolved = 0
        for _ in range(MAX_ROUNDS):
            new = self._round(pts)
            if new is None:
                break
            pts = _merge(pts, new)
        else:
            unresolved = 1
        return pts, unresolved

    def _code_diff(self, a, b, pts):
        return ((pts["target"][a] != pts["target"][b]) | (pts["k0"][a] != pts["k0"][b])
                | (pts["k1"][a] != pts["k1"][b]) | (pts["src_in"][a] != pts["src_in"][b])
                | (pts["img_in"][a] != pts["img_in"][b]))

    def _round(self, pts):
        prm = self.prm
        a = np.flatnonzero(pts["cid"][:-1] == pts["cid"][1:])
        b = a + 1
        lo, hi = pts["u"][a], pts["u"][b]
        mid = 0.5 * (lo + hi)
        splittable = (mid > lo) & (mid < hi) & (hi - lo > 1e-14 * (1.0 + np.abs(lo)))
        diff = self._code_diff(a, b, pts) & splittable
        inserts = []
        if diff.any():
            inserts.append(self._bisect_events(pts, a[diff], b[diff]))
        # refine intervals that carry no event and will be kept
        same = ~self._code_diff(a, b, pts) & splittable
        keep = same & (pts["target"][a] >= 0) & (pts["k1"][a] <= prm.k_max_strip) \
            & (pts["k0"][a] <= prm.k_max_strip)
        if self.mode == Mode.LEAKY:
            keep &= ~pts["src_in"][a] & ~pts["img_in"][a]
        # intervals already checked in an earlier round are skipped
        keep &= ~pts["okr"][a]
        ia, ib = a[keep], b[keep]
        if ia.size:
            m = self.points(pts["cid"][ia], pts["iv"][ia], 0.5 * (pts["u"][ia] + pts["u"][ib]))
            need = self._needs_refine(pts, ia, ib, m)
            pts["okr"][ia[~need]] = True
            if need.any():
                inserts.append({k: v[need] for k, v in m.items()})
        if not inserts:
            return None
        return _concat(inserts)

    def _needs_refine(self, pts, ia, ib, m):
        T = self.T
        hit = pts["hit"][ia]
        r1a, r1b = pts["r1"][ia], pts["r1"][ib]
        dr = wrap_dr(T, r1b - r1a, hit)
        seg = np.hypot(dr, pts["phi1"][ib] - pts["phi1"][ia])
        need = seg > self.h_max
        # code change at the midpoint means a hidden event
        need |= ((m["target"] != pts["target"][ia]) | (m["k1"] != pts["k1"][ia])
                 | (m["k0"] != pts["k0"][ia]) | (m["src_in"] != pts["src_in"][ia])
                 | (m["img_in"] != pts["img_in"][ia]))
        # image Hermite interpolant against the mapped midpoint
        sa = pts["dphi1"][ia] / pts["dr1"][ia]
        sb = pts["dphi1"][ib] / pts["dr1"][ib]
        xm = wrap_dr(T, m["r1"] - r1a, hit)
        with np.errstate(invalid="ignore", divide="ignore"):
            ph, _ = _hermite(0.0, dr, pts["phi1"][ia], pts["phi1"][ib], sa, sb, xm)
            ga = pts["dM"][ia] / pts["dr1"][ia]
            gb = pts["dM"][ib] / pts["dr1"][ib]
            mh, _ = _hermite(0.0, dr, pts["M"][ia], pts["M"][ib], ga, gb, xm)
        dm = np.abs(pts["M"][ib] - pts["M"][ia])
        bad_phi = ~(np.abs(ph - m["phi1"]) <= HERMITE_TOL)
        bad_m = ~(np.abs(mh - m["M"]) <= 1e-7 * dm + 1e-16)
        return need | bad_phi | bad_m

    def _bisect_events(self, pts, a, b):
        """Bisection jobs for every event inside the intervals ``(a, b)``."""
        prm = self.prm
        jobs_i, kinds, levels = [], [], []
        tgt_diff = pts["target"][a] != pts["target"][b]
        # a change of scatterer or failure: locate the first change only
        jobs_i.append(np.flatnonzero(tgt_diff))
        kinds.append(np.zeros(int(tgt_diff.sum()), np.int64))
        levels.append(np.zeros(int(tgt_diff.sum())))
        same = ~tgt_diff
        for kind, key in ((1, "k0"), (2, "k1")):
            if kind == 1:
                sel = np.flatnonzero(pts[key][a] != pts[key][b])
            else:
                sel = np.flatnonzero(same & (pts[key][a] != pts[key][b]))
            if sel.size == 0:
                continue
            oa = _order(pts[key][a[sel]], prm.k0)
            ob = _order(pts[key][b[sel]], prm.k0)
            lo_k, hi_k = np.minimum(oa, ob) + 1, np.maximum(oa, ob)
            cnt = hi_k - lo_k + 1
            rep = np.repeat(sel, cnt)
            ks = np.concatenate([np.arange(x, y + 1) for x, y in zip(lo_k, hi_k)])
            jobs_i.append(rep)
            kinds.append(np.full(rep.size, kind))
            levels.append(1.0 / ks.astype(float) ** 2)
        for kind, key in ((3, "src_in"), (4, "img_in")):
            sel = np.flatnonzero(same & (pts[key][a] != pts[key][b]))
            jobs_i.append(sel)
            kinds.append(np.full(sel.size, kind))
            levels.append(np.zeros(sel.size))
        ji = np.concatenate(jobs_i)
        kind = np.concatenate(kinds)
        level = np.concatenate(levels)
        A, B = a[ji], b[ji]
        cid, iv = pts["cid"][A], pts["iv"][A]
        lo, hi = pts["u"][A].copy(), pts["u"][B].copy()
        ref = {k: pts[k][A] for k in ("target", "src_in", "img_in")}
        ref_side = self._side(kind, level, {k: pts[k][A] for k in ("phi", "phi1")})
        active = np.ones(ji.size, bool)
        for _ in range(80):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            mid = 0.5 * (lo[idx] + hi[idx])
            stop = (mid <= lo[idx]) | (mid >= hi[idx]) | (hi[idx] - lo[idx] <= 1e-14)
            active[idx[stop]] = False
            idx, mid = idx[~stop], mid[~stop]
            if idx.size == 0:
                break
            m = self.points(cid[idx], iv[idx], mid)
            k = kind[idx]
            like_left = np.where(
                k == 0, m["target"] == ref["target"][idx],
                np.where(k == 3, m["src_in"] == ref["src_in"][idx],
                         np.where(k == 4, m["img_in"] == ref["img_in"][idx],
                                  self._side(k, level[idx], m) == ref_side[idx])))
            lo[idx] = np.where(like_left, mid, lo[idx])
            hi[idx] = np.where(like_left, hi[idx], mid)
        u = np.concatenate([lo, hi])
        c = np.concatenate([cid, cid])
        v = np.concatenate([iv, iv])
        # drop parameters that already are nodes
        keep = (u != pts["u"][np.concatenate([A, A])]) & (u != pts["u"][np.concatenate([B, B])])
        u, c, v = u[keep], c[keep], v[keep]
        order = np.lexsort((u, c))
        c, u = c[order], u[order]
        dup = np.zeros(u.size, bool)
        dup[1:] = (c[1:] == c[:-1]) & (u[1:] == u[:-1])
        c, u = c[~dup], u[~dup]
        return self.points(c, self._iv_for(c, u), u)

    def _iv_for(self, c, u):
        P = self.P
        out = np.empty(c.size, np.int64)
        for j in np.unique(c):
            sel = c == j
            a, b = P.off[j], P.off[j + 1]
            out[sel] = a + np.clip(np.searchsorted(P.U[a:b], u[sel], "right") - 1, 0, b - a - 2)
        return out

    @staticmethod
    def _side(kind, level, d):
        phi = np.where(kind == 1, d["phi"], d["phi1"])
        return (HALF_PI - np.abs(phi)) > level


def _merge(pts, new):
    fresh = np.concatenate([np.zeros(pts["u"].size, bool), np.ones(new["u"].size, bool)])
    order = np.lexsort((np.concatenate([pts["u"], new["u"]]),
                        np.concatenate([pts["cid"], new["cid"]])))
    out = {k: np.concatenate([pts[k], new[k]])[order] for k in _FIELDS}
    fresh = fresh[order]
    # drop duplicate parameters
    dup = np.zeros(order.size, bool)
    dup[1:] = (out["cid"][1:] == out["cid"][:-1]) & (out["u"][1:] == out["u"][:-1])
    out = {k: v[~dup] for k, v in out.items()}
    fresh = fresh[~dup]
    # an interval split by a new point must be checked again
    out["okr"][:-1] &= ~fresh[1:]
    return out


def _concat(dicts):
    return {k: np.concatenate([d[k] for d in dicts]) for k in _FIELDS}


# ---------------------------------------------------------------------------
# assembling children


def _ragged(starts, lens):
    """Concatenated ``arange(start, start + len)`` for every run."""
    tot = int(lens.sum())
    base = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return base + np.arange(tot)


def _assemble(pusher: _Pusher, pts, parent_mass_scale):
    """Cut the evaluated points into image pieces and build child arrays."""
    T, prm, mode = pusher.T, pusher.prm, pusher.mode
    n = pts["u"].size
    cid = pts["cid"]
    brk = np.ones(n, bool)  # True where a new run starts
    brk[1:] = (cid[1:] != cid[:-1]) | pusher._code_diff(np.arange(n - 1), np.arange(1, n), pts)
    start = np.flatnonzero(brk)
    end = np.append(start[1:], n)
    scale = parent_mass_scale[cid[start]]
    mass = np.abs(pts["M"][end - 1] - pts["M"][start]) * scale
    stats = dict(strip_truncation=0.0, mass_floor=0.0, cut_gap=0.0, killed=0.0,
                 failed=0.0, parent_length=0.0, child_length=0.0)
    inner = start[1:][cid[start[1:]] == cid[start[1:] - 1]]
    stats["cut_gap"] = float(np.sum(np.abs(pts["M"][inner] - pts["M"][inner - 1])
                                    * parent_mass_scale[cid[inner]]))
    multi = end - start >= 2
    failed = multi & (pts["target"][start] < 0)
    trunc = multi & ~failed & ((pts["k1"][start] > prm.k_max_strip)
                               | (pts["k0"][start] > prm.k_max_strip))
    kill = np.zeros(start.size, bool)
    if mode == Mode.LEAKY:
        kill = multi & ~failed & ~trunc & (pts["src_in"][start] | pts["img_in"][start])
    keep = multi & ~failed & ~trunc & ~kill
    stats["failed"] = float(mass[failed].sum())
    stats["strip_truncation"] = float(mass[trunc].sum())
    stats["killed"] = float(mass[kill].sum())
    floor = prm.mass_floor * max(float(mass[keep].sum() + mass[failed | trunc].sum()), 1e-300)
    low = keep & (mass < floor)
    stats["mass_floor"] = float(mass[low].sum())
    keep &= ~low
    # image orientation is reversed along every run
    s0, e0 = start[keep], end[keep]
    lens = e0 - s0
    idx = _ragged(s0, lens)
    rev = np.repeat(e0 - 1, lens) - (idx - np.repeat(s0, lens))
    run = np.repeat(np.arange(s0.size), lens)
    first = np.concatenate([[0], np.cumsum(lens)[:-1]])
    hit = pts["hit"][rev]
    r1 = pts["r1"][rev]
    d = wrap_dr(T, np.diff(r1), hit[1:])
    d[first[1:] - 1] = 0.0
    bad_run = np.zeros(s0.size, bool)
    inrun = np.ones(d.size, bool)
    inrun[first[1:] - 1] = False
    np.logical_or.at(bad_run, run[1:][inrun], d[inrun] <= 0)
    cs = np.concatenate([[0.0], np.cumsum(d)])
    r1u = r1[first][run] + cs - cs[first][run]
    phi1 = pts["phi1"][rev]
    dr1 = pts["dr1"][rev]
    s1 = pts["dphi1"][rev] / dr1
    sc = parent_mass_scale[cid[rev]]
    Mp = pts["M"][rev]
    M1 = np.abs(Mp - Mp[first][run]) * sc
    rho1 = pts["dM"][rev] / np.abs(dr1) * sc
    tau = pts["tau"][rev]
    seg = _segment_lengths(r1u, phi1, s1)
    seg[first[1:] - 1] = 0.0
    cl = np.concatenate([[0.0], np.cumsum(seg)])
    cl = cl - cl[first][run]
    stats["failed"] += float(mass[keep][bad_run].sum())
    stats["child_length"] = float(np.sum((r1u[first + lens - 1] - r1u[first])[~bad_run]))
    upar = pts["u"]
    par = ~pusher.P.vertical[cid[s0]] & ~bad_run
    stats["parent_length"] = float(np.sum((upar[e0 - 1] - upar[s0])[par]))
    # split long runs at nodes: part boundaries where floor(length / step) changes
    step = prm.delta_star - 2.0 * pusher.h_max
    part = np.floor(cl / step).astype(np.int64)
    newpart = np.zeros(idx.size, bool)
    newpart[first] = True
    newpart[1:] |= part[1:] != part[:-1]
    good = ~bad_run[run]
    bounds = np.flatnonzero(newpart & good)
    # a part runs from its boundary node to the next boundary node (shared) or run end
    runend = (first + lens - 1)[run[bounds]]
    nxt = np.append(bounds[1:], idx.size)
    stop = np.minimum(np.where(run[np.minimum(nxt, idx.size - 1)] == run[bounds], nxt, runend + 1),
                      runend + 1)
    last = np.where(stop == runend + 1, runend, stop)
    plen = last - bounds + 1
    ok = plen >= 2
    bounds, last, plen = bounds[ok], last[ok], plen[ok]
    nid = _ragged(bounds, plen)
    prun = run[bounds]
    out_M = M1[nid] - np.repeat(M1[bounds], plen)
    child = dict(r=r1u[nid], phi=phi1[nid], s=s1[nid], M=out_M, rho=rho1[nid], tau_in=tau[nid],
                 off=np.concatenate([[0], np.cumsum(plen)]).astype(np.int64),
                 scat=hit[bounds].astype(np.int64), mass=M1[last] - M1[bounds],
                 strip=pts["k1"][s0][prun].astype(np.int64))
    return child, stats


def _segment_lengths(r, phi, s):
    """Euclidean length of each Hermite segment of the graph (3-point Gauss)."""
    h = np.diff(r)
    out = np.zeros(h.size)
    for x, w in zip(GL3_X, GL3_W):
        t = 0.5 * (x + 1.0)
        _, der = _hermite(r[:-1], r[1:], phi[:-1], phi[1:], s[:-1], s[1:], r[:-1] + t * h)
        out += 0.5 * w * h * np.sqrt(1.0 + der * der)
    return out


def _split_points(cum, delta):
    """Node indices cutting a curve with cumulative length ``cum`` into parts <= delta."""
    cuts = [0]
    n = cum.size
    while cum[-1] - cum[cuts[-1]] > delta:
        base = cum[cuts[-1]]
        j = int(np.searchsorted(cum, base + delta, "right") - 1)
        if j <= cuts[-1]:
            j = cuts[-1] + 1
        if j >= n - 1:
            break
        cuts.append(j)
    cuts.append(n - 1)
    return cuts


def _family_from(table, child, mode, params, generation, dropped, history, resampled=False):
    return StandardFamily(table=table, r=child["r"], phi=child["phi"], s=child["s"],
                          M=child["M"], rho=child["rho"], tau_in=child["tau_in"],
                          off=child["off"], scat=child["scat"], mass=child["mass"],
                          strip=child["strip"], mode=mode, generation=generation,
                          params=params, dropped=dropped, history=history,
                          resampled=resampled)


def _accumulate(dropped, stats):
    out = dict(dropped)
    for k in ("strip_truncation", "mass_floor", "cut_gap", "killed", "failed"):
        out[k] = out.get(k, 0.0) + stats[k]
    return out


def vertical_line_family(table: Table, r: float, params: Optional[FamilyParams] = None) -> StandardFamily:
    """Push-forward of ``cos(phi)/2 dphi`` on ``{r} x [-pi/2, pi/2]`` as a standard family."""
    params = params or FamilyParams()
    r = float(np.mod(r, table.total_perimeter))
    parents = _Parents.vertical_lines(table, [r])
    pusher = _Pusher(parents, None, Mode.CLOSED, params)
    pts, unresolved = pusher.run()
    child, stats = _assemble(pusher, pts, np.ones(1))
    stats["unresolved"] = unresolved
    dropped = _accumulate({}, stats)
    fam = _family_from(table, child, Mode.CLOSED, params, 1, dropped,
                       [dict(stats, generation=1, pairs=int(child["off"].size - 1))])
    fam.source_r = r
    return fam


def evolve_family(family: StandardFamily, table: Table, hole=None, mode=Mode.CLOSED,
                  params: Optional[FamilyParams] = None,
                  noise_observable: Optional[Observable] = None) -> StandardFamily:
    """One step of the family under F (closed), F-hat (hatted) or L_t (leaky).

    If the pair count exceeds ``max_pairs`` the family is resampled; with
    ``noise_observable`` the resampling error of its measure is estimated
    from three extra resamplings and stored as ``resample_se`` in the step
    history.
    """
    mode = Mode(mode)
    params = params or family.params
    if family.n_pairs == 0:
        raise MassExtinct("family has no pairs")
    parents = _Parents.from_family(family)
    scale = family.mass / np.array([family.M[family.off[j + 1] - 1] for j in range(family.n_pairs)])
    pusher = _Pusher(parents, hole, mode, params)
    pts, unresolved = pusher.run()
    child, stats = _assemble(pusher, pts, scale)
    stats["unresolved"] = unresolved
    before = family.total_mass
    after = float(child["mass"].sum())
    if mode == Mode.LEAKY:
        if after <= 0:
            raise MassExtinct("no surviving mass")
        stats["survival"] = after / before
    stats["generation"] = family.generation + 1
    stats["pairs_before_resample"] = int(child["off"].size - 1)
    stats["Z_before_resample"] = _z_of(child, table)
    resampled = family.resampled
    stats["resample_se"] = 0.0
    if child["off"].size - 1 > params.max_pairs:
        gen = family.generation + 1
        if noise_observable is not None:
            ref = _measure_of(child, table, noise_observable)
            alt = [_measure_of(_resample(child, params.max_pairs, params.seed + 7919 * (i + 1), gen),
                               table, noise_observable) for i in range(3)]
            stats["resample_se"] = float(np.sqrt(np.mean((np.array(alt) - ref) ** 2)))
        child = _resample(child, params.max_pairs, params.seed, gen)
        resampled = True
    stats["pairs"] = int(child["off"].size - 1)
    dropped = _accumulate(family.dropped, stats)
    fam = _family_from(table, child, mode, params, family.generation + 1, dropped,
                       family.history + [stats], resampled)
    if mode == Mode.LEAKY:
        fam.mass = fam.mass / fam.mass.sum()
        _rescale_nodes(fam)
    return fam


def _rescale_nodes(fam: StandardFamily):
    """Keep node ``M`` and ``rho`` consistent with pair masses."""
    ends = fam.M[fam.off[1:] - 1]
    fac = np.where(ends > 0, fam.mass / np.where(ends > 0, ends, 1.0), 1.0)
    f = np.repeat(fac, np.diff(fam.off))
    fam.M = fam.M * f
    fam.rho = fam.rho * f


def _measure_of(child, table, observable) -> float:
    tmp = StandardFamily(table, child["r"], child["phi"], child["s"], child["M"], child["rho"],
                         child["tau_in"], child["off"], child["scat"], child["mass"], child["strip"])
    return family_measure(tmp, observable)


def _z_of(child, table) -> float:
    off = child["off"]
    if off.size < 2:
        return 0.0
    tmp = StandardFamily(table, child["r"], child["phi"], child["s"], child["M"], child["rho"],
                         child["tau_in"], off, child["scat"], child["mass"], child["strip"])
    return boundary_Z(tmp)


def _comb_threshold(mass, n_target):
    """Threshold c with sum(min(m / c, 1)) == n_target."""
    m = np.sort(mass)[::-1]
    tail = np.cumsum(m[::-1])[::-1]  # tail[i] = sum of m[i:]
    for k in range(min(n_target, m.size)):
        c = tail[k] / (n_target - k)
        if m[k] < c:
            return c
    return m[min(n_target, m.size) - 1]


def _resample(child, n_target, seed, generation):
    """Reduce a family to about ``n_target`` pairs without bias.

    Pairs heavier than a threshold c are kept unchanged. Lighter pairs go
    through systematic resampling with grid step c in position order, so a
    survivor carries mass c. The expected mass of every pair is preserved.
    """
    off = child["off"]
    mass = child["mass"]
    npairs = off.size - 1
    first = off[:-1]
    c = _comb_threshold(mass, n_target)
    heavy = mass >= c
    light = np.flatnonzero(~heavy)
    key = light[np.lexsort((child["r"][first][light], child["scat"][light]))]
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, generation], np.uint64)))
    u0 = rng.random() * c
    cm = np.concatenate([[0.0], np.cumsum(mass[key])])
    hits = (np.floor((cm[1:] - u0) / c) - np.floor((cm[:-1] - u0) / c)).astype(np.int64)
    newm = mass.copy()
    newm[key] = np.where(hits > 0, c, 0.0)
    keep = np.flatnonzero(newm > 0)
    newmass = newm[keep]
    idx = np.concatenate([np.arange(off[j], off[j + 1]) for j in keep]) if keep.size else np.zeros(0, np.int64)
    out = {k: child[k][idx] for k in ("r", "phi", "s", "M", "rho", "tau_in")}
    lens = off[keep + 1] - off[keep]
    out["off"] = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    out["scat"] = child["scat"][keep]
    out["strip"] = child["strip"][keep]
    fac = np.repeat(newmass / mass[keep], lens)
    out["M"] = out["M"] * fac
    out["rho"] = out["rho"] * fac
    out["mass"] = newmass
    return out


# ---------------------------------------------------------------------------
# measurements


def _gl_nodes(fam: StandardFamily):
    """Gauss points on every node interval: pair index, canonical r, phi, dM."""
    off = fam.off
    idx = fam.pair_index()
    left = np.ones(fam.r.size, bool)
    left[off[1:] - 1] = False
    i = np.flatnonzero(left)
    r0, r1 = fam.r[i], fam.r[i + 1]
    h = r1 - r0
    outs = []
    for x, w in zip(GL3_X, GL3_W):
        t = 0.5 * (x + 1.0)
        u = r0 + t * h
        phi, _ = _hermite(r0, r1, fam.phi[i], fam.phi[i + 1], fam.s[i], fam.s[i + 1], u)
        _, dm = _hermite(r0, r1, fam.M[i], fam.M[i + 1], fam.rho[i], fam.rho[i + 1], u)
        outs.append((idx[i], u, phi, 0.5 * w * h * dm))
    return outs


def family_measure(family: StandardFamily, observable: Observable) -> float:
    """``sum_j p_j int rho_j phi(r, phi_j(r)) dr`` with pair-normalized densities."""
    tot = 0.0
    norm = family.mass.sum()
    for pi, u, phi, wdm in _gl_nodes(family):
        rc = family.table.canonical_r(u, family.scat[pi])
        tot += float(np.sum(observable(family.table, rc, phi) * wdm))
    return tot / norm


def hole_mass(family: StandardFamily, hole) -> float:
    """Family measure of the hole strip ``H_t`` (exact in the Hermite representation)."""
    if hole.size == 0:
        return 0.0
    tot = 0.0
    idx = family.pair_index()
    rc = family.canonical_r()
    shift = rc - family.r
    for j in range(family.n_pairs):
        a, b = family.off[j], family.off[j + 1]
        lo, hi = hole.lo - shift[a], hole.hi - shift[a]
        r = family.r[a:b]
        x0, x1 = max(lo, r[0]), min(hi, r[-1])
        if x1 <= x0:
            continue
        m = []
        for x in (x0, x1):
            k = a + min(int(np.searchsorted(r, x, "right")) - 1, b - a - 2)
            v, _ = _hermite(family.r[k], family.r[k + 1], family.M[k], family.M[k + 1],
                            family.rho[k], family.rho[k + 1], x)
            m.append(v)
        tot += m[1] - m[0]
    return float(tot / family.mass.sum())


def pair_lengths(family: StandardFamily) -> np.ndarray:
    seg = np.zeros(family.r.size - 1)
    valid = np.ones(family.r.size - 1, bool)
    valid[family.off[1:-1] - 1] = False
    seg_all = _segment_lengths(family.r, family.phi, family.s)
    seg[valid] = seg_all[valid]
    cs = np.concatenate([[0.0], np.cumsum(seg)])
    return cs[family.off[1:] - 1] - cs[family.off[:-1]]


def boundary_Z(family) -> float:
    """``Z = sum_j p_j / |W_j|`` with Euclidean curve lengths."""
    if isinstance(family, (list, tuple)):
        # explicit (weight, length) pairs
        return float(sum(p / l for p, l in family))
    return float(np.sum(family.weights / pair_lengths(family)))


@dataclass
class RegularityReport:
    Z: float
    varpi: float
    max_phi2: float
    max_density_ratio: float
    density_ratios: list
    n_pairs: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("density_ratios")
        return d


def holder_constant(r, rho, max_all: int = 64) -> float:
    """``sup |log rho(x)/rho(y)| / |x - y|^(1/3)`` over node pairs of one curve."""
    n = r.size
    lr = np.log(rho)
    if n <= max_all:
        i, j = np.triu_indices(n, 1)
    else:
        i = np.concatenate([np.arange(n - d) for d in _strides(n)])
        j = np.concatenate([np.arange(d, n) for d in _strides(n)])
        # always include the extreme pair
        i = np.append(i, min(np.argmin(lr), np.argmax(lr)))
        j = np.append(j, max(np.argmin(lr), np.argmax(lr)))
    dx = np.abs(r[j] - r[i])
    ok = dx > 0
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(lr[j] - lr[i])[ok] / dx[ok] ** (1.0 / 3.0)))


def _strides(n):
    d, out = 1, []
    while d < n:
        out.append(d)
        d *= 2
    return out


def regularity_report(family: StandardFamily) -> RegularityReport:
    varpi = 0.0
    phi2 = 0.0
    ratios = []
    for j in range(family.n_pairs):
        a, b = family.off[j], family.off[j + 1]
        r, rho, s = family.r[a:b], family.rho[a:b], family.s[a:b]
        varpi = max(varpi, holder_constant(r, rho))
        if b - a > 1:
            phi2 = max(phi2, float(np.max(np.abs(np.diff(s) / np.diff(r)))))
        ratios.append(float(rho.max() / rho.min()))
    return RegularityReport(Z=boundary_Z(family), varpi=varpi, max_phi2=phi2,
                            max_density_ratio=max(ratios) if ratios else 1.0,
                            density_ratios=ratios, n_pairs=family.n_pairs)


def cone_violations(family: StandardFamily, slack: float = 1e-8) -> int:
    """Nodes whose slope leaves ``[kappa, kappa + cos(phi)/tau_in]``."""
    idx = family.pair_index()
    kappa = 1.0 / family.table.radii[family.scat[idx]]
    upper = kappa + np.cos(family.phi) / family.tau_in
    s = family.s
    return int(np.sum(~((s >= kappa - slack) & (s <= upper + slack))))


def resample_stderr(family: StandardFamily) -> float:
    """Accumulated resampling error recorded in the family history."""
    return float(math.sqrt(sum(h.get("resample_se", 0.0) ** 2 for h in family.history)))


@dataclass
class DecaySeries:
    d: list
    floor: list
    gamma: float
    r2: float
    n_fit: int
    mu_a: list
    mu_b: list

    def to_dict(self) -> dict:
        return asdict(self)


def _replicate_params(family: StandardFamily, rep: int) -> FamilyParams:
    return replace(family.params, seed=family.params.seed + 1_000_003 * rep)


def mixing_diagnostic(family_a: StandardFamily, family_b: StandardFamily, table: Table, hole,
                      n_max: int, observable: Observable, replicates: int = 2) -> DecaySeries:
    """``d_n = |mu_{L^n G_a}(phi) - mu_{L^n G_b}(phi)|`` and a geometric fit before the floor.

    Each family is evolved ``replicates`` times with independent resampling
    seeds. Measures are replicate means and the noise floor is three
    standard errors of the difference, taken from the replicate spread
    (running maximum over n, since resampling noise only accumulates).
    """
    if replicates < 2:
        raise ValueError("replicates must be >= 2 to estimate the noise floor")
    mode = Mode.LEAKY if (hole is not None and hole.size > 0) else Mode.CLOSED
    same = family_a is family_b
    pa = [_replicate_params(family_a, k) for k in range(replicates)]
    pb = [_replicate_params(family_b, k) for k in range(replicates)]
    fa = [family_a] * replicates
    fb = [family_b] * replicates
    d, floor, ma, mb = [], [], [], []
    se_run = 0.0
    for n in range(n_max + 1):
        if n:
            fa = [evolve_family(f, table, hole, mode, p) for f, p in zip(fa, pa)]
            fb = fa if same else [evolve_family(f, table, hole, mode, p) for f, p in zip(fb, pb)]
        va = np.array([family_measure(f, observable) for f in fa])
        vb = va if same else np.array([family_measure(f, observable) for f in fb])
        ma.append(float(va.mean()))
        mb.append(float(vb.mean()))
        d.append(abs(ma[-1] - mb[-1]))
        se = math.sqrt((va.var(ddof=1) + vb.var(ddof=1)) / replicates)
        se_run = max(se_run, se)
        floor.append(3.0 * se_run + 1e-12 * observable.sup_norm)
    run = 0
    while run < len(d) and d[run] > floor[run]:
        run += 1
    if run >= 3:
        y = np.log(np.array(d[:run]))
        x = np.arange(run, dtype=float)
        sl, ic = np.polyfit(x, y, 1)
        pred = ic + sl * x
        ss = ((y - y.mean()) ** 2).sum()
        r2 = float(1 - ((y - pred) ** 2).sum() / ss) if ss > 0 else 1.0
        gamma = float(math.exp(sl))
    else:
        gamma, r2 = float("nan"), float("nan")
    return DecaySeries(d=d, floor=floor, gamma=gamma, r2=r2, n_fit=run, mu_a=ma, mu_b=mb)
