"""The collision map, its inverse and differential, cones and homogeneity strips.

Coordinates are ``(r, phi)``: arc-length and the angle of the outgoing velocity
with the normal pointing into the table, positive toward the counterclockwise
tangent. With this convention ``dr1/dphi = -tau/cos(phi1) < 0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import NoCollision, SingularInput
from .geometry import Table

HALF_PI = 0.5 * math.pi
SINGULAR_TOL = 1e-12
DIFF_TOL = 1e-9
DEFAULT_K0 = 10


@dataclass(frozen=True)
class PhasePoint:
    r: float
    phi: float

    @property
    def grazing_margin(self) -> float:
        return HALF_PI - abs(self.phi)

    def reversed(self) -> "PhasePoint":
        return PhasePoint(self.r, -self.phi)


@dataclass(frozen=True)
class CollisionStep:
    image: PhasePoint
    tau: float
    grazing_margin: float
    source: int
    scatterer: int


@dataclass(frozen=True)
class Jacobian2x2:
    """Entries of DF in ``(r, phi)`` coordinates plus the data they are built from."""

    a: float
    b: float
    c: float
    d: float
    tau: float
    kappa: float
    kappa1: float
    phi: float
    phi1: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c


class StepArrays(NamedTuple):
    r1: np.ndarray
    phi1: np.ndarray
    tau: np.ndarray
    src: np.ndarray
    hit: np.ndarray
    target: np.ndarray
    status: np.ndarray


def step_arrays(table: Table, r, phi, graze_tol: float = 0.0,
                reach: Optional[float] = None) -> StepArrays:
    """Vectorized collision map. Failures are reported through ``status``."""
    r = np.ascontiguousarray(r, dtype=float).ravel()
    phi = np.ascontiguousarray(phi, dtype=float).ravel()
    reach = table.flight_bound if reach is None else reach
    src, theta = table.locate(r)
    src = src.astype(np.int64)
    n = r.size
    r1, phi1, tau = np.empty(n), np.empty(n), np.empty(n)
    hit, target, status = (np.empty(n, np.int64) for _ in range(3))
    cx, cy, rad, ref = table._arrays
    ptr, cj, cox, coy, clb = table.candidates(reach)
    _kernels.boundary_step(src, theta, phi, cx, cy, rad, table.cumulative_arclength,
                           ref, ptr, cj, cox, coy, clb, reach, graze_tol,
                           r1, phi1, tau, hit, target, status)
    return StepArrays(r1, phi1, tau, src, hit, target, status)


def differential_arrays(table: Table, phi, step: StepArrays):
    """Closed-form DF entries ``(a, b, c, d)`` for a batch of mapped points."""
    rad = table.radii
    k = 1.0 / rad[step.src]
    k1 = 1.0 / rad[np.maximum(step.hit, 0)]
    c0 = np.cos(phi)
    c1 = np.cos(step.phi1)
    tau = step.tau
    s = -1.0 / c1
    a = s * (tau * k + c0)
    b = s * tau
    c = s * (tau * k * k1 + k * c1 + k1 * c0)
    d = s * (tau * k1 + c1)
    return a, b, c, d


def wrap_dr(table: Table, dr, scatterer):
    """Fold an arc-length difference on one circle into ``(-P/2, P/2]``."""
    per = 2.0 * np.pi * table.radii[scatterer]
    return dr - per * np.round(dr / per)


def _check_input(x: PhasePoint):
    if not abs(x.phi) <= HALF_PI or HALF_PI - abs(x.phi) < SINGULAR_TOL:
        raise SingularInput(f"phi={x.phi!r} is grazing")


def billiard_map(table: Table, x: PhasePoint) -> CollisionStep:
    _check_input(x)
    st = step_arrays(table, [x.r], [x.phi])
    if st.status[0] == _kernels.NO_HIT:
        raise NoCollision(f"no collision within {table.flight_bound} from {x}")
    phi1 = float(st.phi1[0])
    return CollisionStep(image=PhasePoint(float(st.r1[0]), phi1), tau=float(st.tau[0]),
                         grazing_margin=HALF_PI - abs(phi1), source=int(st.src[0]),
                         scatterer=int(st.hit[0]))


def inverse_map(table: Table, x: PhasePoint) -> PhasePoint:
    """F^{-1} = I F I with the involution ``I(r, phi) = (r, -phi)``."""
    step = billiard_map(table, x.reversed())
    if step.grazing_margin < SINGULAR_TOL:
        raise SingularInput(f"{x} has a grazing preimage")
    return step.image.reversed()


def differential(table: Table, x: PhasePoint) -> Jacobian2x2:
    step = billiard_map(table, x)
    c1 = math.cos(step.image.phi)
    if c1 < DIFF_TOL:
        raise SingularInput(f"image of {x} is grazing (cos phi1={c1:.3g})")
    k = 1.0 / table.radii[step.source]
    k1 = 1.0 / table.radii[step.scatterer]
    c0 = math.cos(x.phi)
    tau = step.tau
    s = -1.0 / c1
    return Jacobian2x2(a=s * (tau * k + c0), b=s * tau,
                       c=s * (tau * k * k1 + k * c1 + k1 * c0), d=s * (tau * k1 + c1),
                       tau=tau, kappa=k, kappa1=k1, phi=x.phi, phi1=step.image.phi)


class StopReason(str, enum.Enum):
    ENTERED_HOLE = "EnteredHole"
    GRAZING = "Grazing"


@dataclass
class Trajectory:
    points: list
    taus: list = field(default_factory=list)
    stop_reason: Optional[StopReason] = None

    def __len__(self):
        return len(self.points)

    def rows(self):
        """``(step, r, phi, tau)`` rows; tau is the flight leading to the point."""
        out = []
        for k, p in enumerate(self.points):
            out.append((k, p.r, p.phi, self.taus[k - 1] if k > 0 else float("nan")))
        return out


def iterate(table: Table, x: PhasePoint, n: int, hole=None) -> Trajectory:
    """Orbit ``x_0..x_m``; stops early when a point lies in ``hole`` or grazes."""
    if n < 0:
        raise ValueError("n must be >= 0")
    traj = Trajectory(points=[x])
    cur = x
    for k in range(n + 1):
        if hole is not None and hole.contains(cur.r):
            traj.stop_reason = StopReason.ENTERED_HOLE
            return traj
        if k == n:
            break
        if cur.grazing_margin < SINGULAR_TOL:
            traj.stop_reason = StopReason.GRAZING
            return traj
        step = billiard_map(table, cur)
        cur = step.image
        traj.points.append(cur)
        traj.taus.append(step.tau)
    return traj


def period_two_orbit(table: Table, i: int = 0, j: int = 1) -> PhasePoint:
    """Head-on point on scatterer ``i`` aimed at the nearest translate of ``j``."""
    a, b = table.scatterers[i], table.scatterers[j]
    dx = (b.center[0] - a.center[0] + 0.5) % 1.0 - 0.5
    dy = (b.center[1] - a.center[1] + 0.5) % 1.0 - 0.5
    ang = math.atan2(dy, dx)
    r = table.cumulative_arclength[i] + a.radius * ((ang - a.ref_angle) % (2 * math.pi))
    return PhasePoint(float(r), 0.0)


class HitPoint(NamedTuple):
    position: tuple
    scatterer: int
    r: float
    phi: float
    grazing_margin: float


def next_collision(table: Table, position, direction):
    """First scatterer hit by the ray from ``position`` along ``direction``.

    Returns ``(HitPoint, tau)``. ``phi`` of the hit point is the post-collision
    angle. A start point on a scatterer boundary is allowed if the direction
    does not point into that scatterer.
    """
    px, py = (float(v) for v in position)
    vx, vy = (float(v) for v in direction)
    nv = math.hypot(vx, vy)
    if abs(nv - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    cx, cy, rad, ref = table._arrays
    reach = table.flight_bound
    cj, cox, coy = [], [], []
    m = int(math.ceil(reach + rad.max())) + 1
    for j in range(table.n_scatterers):
        for ox in range(-m, m + 1):
            for oy in range(-m, m + 1):
                qx, qy = cx[j] + ox - px, cy[j] + oy - py
                d = math.hypot(qx, qy)
                if d < rad[j] - 1e-9:
                    raise ValueError(f"start point lies inside scatterer {j}")
                if d <= rad[j] + 1e-9 and qx * vx + qy * vy > 0:
                    raise ValueError(f"direction points into host scatterer {j}")
                if d <= reach + rad[j]:
                    cj.append(j)
                    cox.append(float(ox))
                    coy.append(float(oy))
    cj = np.array(cj, dtype=np.int64)
    cox, coy = np.array(cox), np.array(coy)
    c, s = _kernels.point_flight(px, py, vx, vy, cx, cy, rad, cj, cox, coy,
                                 np.full(cj.size, -np.inf), reach)
    if c < 0:
        raise NoCollision(f"no collision within {reach} from {position}")
    j, r1, phi1, _ = _kernels._reflect(px, py, vx, vy, s, c, cx, cy, rad, cj, cox,
                                       coy, table.cumulative_arclength, ref)
    hx, hy = (px + s * vx) % 1.0, (py + s * vy) % 1.0
    return HitPoint((hx, hy), int(j), float(r1), float(phi1), HALF_PI - abs(phi1)), float(s)


class ConeKind(str, enum.Enum):
    LARGE_UNSTABLE = "C^u"
    SMALL_UNSTABLE = "hat C^u"
    LARGE_STABLE = "C^s"
    SMALL_STABLE = "hat C^s"


def in_unstable_cone(kappa, vr, vphi, upper=None, slack=0.0):
    """Vectorized membership of ``(vr, vphi)`` in ``kappa <= dphi/dr <= upper``.

    ``upper=None`` means the large cone (vertical included).
    """
    vr = np.asarray(vr, dtype=float)
    vphi = np.asarray(vphi, dtype=float)
    sgn = np.where(vphi < 0, -1.0, 1.0)
    vr, vphi = vr * sgn, vphi * sgn
    ok = (vr >= 0) & (vphi >= (kappa - slack) * vr) & ((vr != 0) | (vphi != 0))
    if upper is not None:
        ok &= (vr > 0) & (vphi <= (upper + slack) * vr)
    return ok


def cone_membership(table: Table, x: PhasePoint, v, kind: ConeKind,
                    slack: float = 0.0) -> bool:
    vr, vphi = float(v[0]), float(v[1])
    if vr == 0 and vphi == 0:
        raise ValueError("v must be nonzero")
    kind = ConeKind(kind)
    if kind in (ConeKind.LARGE_STABLE, ConeKind.SMALL_STABLE):
        # time reversal swaps the stable and unstable families
        x, vphi = x.reversed(), -vphi
        kind = (ConeKind.LARGE_UNSTABLE if kind == ConeKind.LARGE_STABLE
                else ConeKind.SMALL_UNSTABLE)
    kappa = float(table.curvature(x.r))
    upper = None
    if kind == ConeKind.SMALL_UNSTABLE:
        # incoming free path of x is the outgoing one of I(x)
        tau_in = billiard_map(table, x.reversed()).tau
        upper = kappa + math.cos(x.phi) / tau_in
    return bool(in_unstable_cone(kappa, vr, vphi, upper, slack))


@dataclass(frozen=True)
class HomogeneityIndex:
    index: float
    on_boundary: bool = False
    singular: bool = False


def classify_point(x: PhasePoint, k0: int = DEFAULT_K0) -> HomogeneityIndex:
    """Homogeneity strip of ``x``: 0 away from grazing, else ``k >= k0``."""
    if k0 < 2:
        raise ValueError("k0 must be >= 2")
    m = HALF_PI - abs(x.phi)
    if m <= 0.0:
        return HomogeneityIndex(math.inf, on_boundary=True, singular=True)
    tol = 8.0 * np.finfo(float).eps
    k0m = 1.0 / (k0 * k0)
    if m > k0m * (1 + tol):
        return HomogeneityIndex(0)
    k = int(math.floor(m ** -0.5))
    for kk in (k, k + 1):
        if abs(m * kk * kk - 1.0) <= tol:
            return HomogeneityIndex(max(kk, k0), on_boundary=True)
    return HomogeneityIndex(max(k, k0))


def strip_index_arrays(phi, k0: int = DEFAULT_K0) -> np.ndarray:
    """Vectorized strip index (0 or k >= k0); exact boundaries go to the outer strip."""
    m = HALF_PI - np.abs(np.asarray(phi, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.floor(np.where(m > 0, m, np.nan) ** -0.5)
    k = np.where(m <= 0, np.iinfo(np.int64).max, np.nan_to_num(k))
    out = np.where(m > 1.0 / (k0 * k0), 0, np.maximum(k, k0))
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# diagnostics and check suites


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    n: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "value": self.value,
                "tolerance": self.tolerance, "n": self.n, "detail": self.detail}


def sample_admissible(table: Table, n: int, rng: np.random.Generator,
                      margin: float, image_margin: Optional[float] = None):
    """Uniform ``(r, phi)`` samples whose angle and image angle keep ``margin`` from grazing."""
    image_margin = margin if image_margin is None else image_margin
    rs, ps = [], []
    got = 0
    while got < n:
        m = 2 * (n - got) + 16
        r = rng.uniform(0.0, table.total_perimeter, m)
        phi = rng.uniform(-HALF_PI + margin, HALF_PI - margin, m)
        st = step_arrays(table, r, phi)
        ok = (st.status == _kernels.OK) & (HALF_PI - np.abs(st.phi1) > image_margin)
        rs.append(r[ok])
        ps.append(phi[ok])
        got += int(ok.sum())
    return np.concatenate(rs)[:n], np.concatenate(ps)[:n]


def determinant_suite(table: Table, n: int = 10_000, seed: int = 0,
                      margin: float = 1e-3, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    r, phi = sample_admissible(table, n, rng, margin)
    st = step_arrays(table, r, phi)
    a, b, c, d = differential_arrays(table, phi, st)
    err = np.abs(a * d - b * c - np.cos(phi) / np.cos(st.phi1))
    return CheckResult("determinant", bool(err.max() < tol), float(err.max()), tol, n)


def jacobian_fd_suite(table: Table, n: int = 1000, seed: int = 0, h: float = 1e-6,
                      margin: float = 0.1, tol: float = 1e-5) -> CheckResult:
    """Central differences of F against the closed-form differential.

    Points whose perturbed images change target (within ``h`` of a
    discontinuity) are resampled.
    """
    rng = np.random.default_rng(seed)
    rs, ps = [], []
    skipped = 0
    while sum(len(x) for x in rs) < n:
        r, phi = sample_admissible(table, n, rng, margin)
        st = step_arrays(table, r, phi)
        same = np.ones(r.size, bool)
        for dr, dp in ((h, 0), (-h, 0), (0, h), (0, -h)):
            sp = step_arrays(table, r + dr, phi + dp)
            same &= (sp.target == st.target) & (sp.src == st.src)
        skipped += int((~same).sum())
        rs.append(r[same])
        ps.append(phi[same])
    r, phi = np.concatenate(rs)[:n], np.concatenate(ps)[:n]
    st = step_arrays(table, r, phi)
    exact = np.stack(differential_arrays(table, phi, st))
    fd = np.empty_like(exact)
    for col, (dr, dp) in enumerate(((h, 0), (0, h))):
        p = step_arrays(table, r + dr, phi + dp)
        m = step_arrays(table, r - dr, phi - dp)
        fd[col] = wrap_dr(table, p.r1 - m.r1, st.hit) / (2 * h)
        fd[2 + col] = (p.phi1 - m.phi1) / (2 * h)
    rel = np.abs(fd - exact) / np.abs(exact)
    worst = float(rel.max())
    return CheckResult("jacobian_fd", worst < tol, worst, tol, n,
                       {"skipped_near_discontinuity": skipped, "h": h})


def time_reversal_suite(table: Table, n: int = 10_000, seed: int = 0,
                        margin: float = 1e-6, tol: float = 1e-9) -> CheckResult:
    """max over samples of |F(F^{-1}(x)) - x| in (r, phi)."""
    rng = np.random.default_rng(seed)
    r, phi = sample_admissible(table, n, rng, margin)
    back = step_arrays(table, r, -phi)
    # F^{-1}(x) = I(F(I x))
    fwd = step_arrays(table, back.r1, -back.phi1)
    er = np.abs(wrap_dr(table, fwd.r1 - r, fwd.hit))
    ep = np.abs(fwd.phi1 - phi)
    err = float(np.max(np.maximum(er, ep)))
    return CheckResult("time_reversal", err < tol, err, tol, n)


def cone_suite(table: Table, n: int = 10_000, seed: int = 0, slack: float = 1e-8,
               margin: float = 1e-6) -> CheckResult:
    """Push random vectors of the large unstable cone and test the small cone at F(x).

    Vectors are drawn with ``dphi/dr = kappa + u`` for ``u`` spanning the whole
    cone (log-uniform up to 1e6, plus the vertical direction).
    """
    rng = np.random.default_rng(seed)
    r, phi = sample_admissible(table, n, rng, margin)
    st = step_arrays(table, r, phi)
    kappa = 1.0 / table.radii[st.src]
    u = 10.0 ** rng.uniform(-6, 6, n)
    u[: max(1, n // 100)] = np.inf
    vr = np.where(np.isinf(u), 0.0, 1.0)
    vphi = np.where(np.isinf(u), 1.0, kappa + np.where(np.isinf(u), 0.0, u))
    a, b, c, d = differential_arrays(table, phi, st)
    wr, wphi = a * vr + b * vphi, c * vr + d * vphi
    k1 = 1.0 / table.radii[st.hit]
    upper = k1 + np.cos(st.phi1) / st.tau
    ok = in_unstable_cone(k1, wr, wphi, upper, slack)
    return CheckResult("cone_invariance", bool(ok.all()), float((~ok).sum()), 0.0, n)


def stable_cone_suite(table: Table, n: int = 10_000, seed: int = 0,
                      slack: float = 1e-8, margin: float = 1e-6) -> CheckResult:
    """DF^{-1} of stable vectors lands in the small stable cone (via time reversal)."""
    res = cone_suite(table, n, seed + 1, slack, margin)
    return CheckResult("stable_cone_invariance", res.passed, res.value, 0.0, n)


def cone_constant(table: Table, tau_min: float) -> float:
    """Bound with ``1/C <= |dr/dphi| <= C`` for vectors in the small cones."""
    return float(max(table.kappa_max + 1.0 / tau_min, 1.0 / table.kappa_min))


def expansion_fit(table: Table, n_samples: int = 2000, n_max: int = 20,
                  seed: int = 0) -> dict:
    """Fit ``min_x |DF^n v| >= c Lambda0^n`` for unit vertical vectors.

    Orbits that come within 1e-9 of grazing are dropped.
    """
    rng = np.random.default_rng(seed)
    r, phi = sample_admissible(table, n_samples, rng, 1e-6)
    vr, vphi = np.zeros(r.size), np.ones(r.size)
    alive = np.ones(r.size, bool)
    logn = np.zeros((n_max + 1, r.size))
    lognorm = np.zeros(r.size)
    for k in range(1, n_max + 1):
        st = step_arrays(table, r, phi, graze_tol=1e-9)
        alive &= st.status == _kernels.OK
        r = np.where(alive, st.r1, r)
        phinew = np.where(alive, st.phi1, phi)
        a, b, c, d = differential_arrays(table, phi, st)
        wr, wphi = a * vr + b * vphi, c * vr + d * vphi
        nrm = np.hypot(wr, wphi)
        nrm = np.where(alive, nrm, 1.0)
        lognorm += np.log(nrm)
        vr, vphi = wr / nrm, wphi / nrm
        vr = np.where(alive, vr, 0.0)
        vphi = np.where(alive, vphi, 1.0)
        phi = phinew
        logn[k] = lognorm
    logmin = logn[:, alive].min(axis=1)
    ks = np.arange(n_max + 1)
    slope, icpt = np.polyfit(ks[1:], logmin[1:], 1)
    # lower envelope through the fitted rate
    c = float(np.exp(np.min(logmin[1:] - slope * ks[1:])))
    return {"lambda0": float(np.exp(slope)), "c": c, "n_orbits": int(alive.sum()),
            "log_min_norm": logmin.tolist()}


def squash_check(table: Table, lengths=(1e-2, 1e-3, 1e-4, 1e-5), n_curves: int = 400,
                 n_nodes: int = 200, seed: int = 0) -> dict:
    """Ratio ``|F(W)| / sqrt|W|`` for short unstable segments ``W``.

    Segments have slope ``kappa + 1`` (inside the unstable cone) through
    random points; image length is measured per smooth component.
    """
    rng = np.random.default_rng(seed)
    out = {}
    r0, p0 = sample_admissible(table, n_curves, rng, 1e-8, image_margin=0.0)
    kappa = table.curvature(r0)
    s = np.linspace(0.0, 1.0, n_nodes)
    for ell in lengths:
        slope = kappa + 1.0
        dr = ell / np.sqrt(1.0 + slope ** 2)
        rr = r0[:, None] + dr[:, None] * s[None, :]
        pp = p0[:, None] + (dr * slope)[:, None] * s[None, :]
        pp = np.clip(pp, -HALF_PI + 1e-15, HALF_PI - 1e-15)
        st = step_arrays(table, rr.ravel(), pp.ravel())
        r1 = st.r1.reshape(rr.shape)
        p1 = st.phi1.reshape(rr.shape)
        tg = st.target.reshape(rr.shape)
        hit = st.hit.reshape(rr.shape)
        seg = np.hypot(wrap_dr(table, np.diff(r1, axis=1), hit[:, 1:]), np.diff(p1, axis=1))
        seg = np.where(tg[:, 1:] == tg[:, :-1], seg, 0.0)
        img = seg.sum(axis=1)
        out[float(ell)] = float(np.max(img / math.sqrt(ell)))
    return {"max_ratio": out, "C": max(out.values())}


def run_map_suites(table: Table, seed: int = 0) -> list:
    return [determinant_suite(table, seed=seed), jacobian_fd_suite(table, seed=seed),
            time_reversal_suite(table, seed=seed), cone_suite(table, seed=seed),
            stable_cone_suite(table, seed=seed)]
