"""Billiard tables made of disjoint circular scatterers on the unit torus.

Arc-length ``r`` runs over the scatterers in list order. Each circle is
traversed counterclockwise starting from the point at its reference angle
(default 0, the rightmost point), so ``r`` in ``[0, |dD|)`` maps bijectively
onto the boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import HorizonViolation, OverlapError

DEFAULT_TABLE_SPEC = (((0.0, 0.0), 0.4), ((0.5, 0.5), 0.2))

# flight bound used when the sampled horizon is not finite
FALLBACK_REACH = 8.0


@dataclass(frozen=True)
class Scatterer:
    center: tuple
    radius: float
    ref_angle: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        cx, cy = (float(c) % 1.0 for c in self.center)
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.radius


@dataclass(frozen=True)
class BoundaryFrame:
    position: tuple
    unit_tangent: tuple
    inward_normal: tuple
    curvature: float
    scatterer: int


@dataclass(frozen=True, eq=False)
class Table:
    """Immutable billiard table; build with :func:`build_table`."""

    scatterers: tuple
    cumulative_arclength: np.ndarray = field(init=False, repr=False)
    total_perimeter: float = field(init=False)

    def __post_init__(self):
        perims = [s.perimeter for s in self.scatterers]
        cum = np.concatenate([[0.0], np.cumsum(perims)])
        cum.setflags(write=False)
        object.__setattr__(self, "cumulative_arclength", cum)
        object.__setattr__(self, "total_perimeter", float(cum[-1]))

    # flat arrays consumed by the kernels
    @cached_property
    def _arrays(self):
        cx = np.array([s.center[0] for s in self.scatterers], dtype=float)
        cy = np.array([s.center[1] for s in self.scatterers], dtype=float)
        rad = np.array([s.radius for s in self.scatterers], dtype=float)
        ref = np.array([s.ref_angle for s in self.scatterers], dtype=float)
        return cx, cy, rad, ref

    @property
    def n_scatterers(self) -> int:
        return len(self.scatterers)

    @property
    def radii(self) -> np.ndarray:
        return self._arrays[2]

    @property
    def kappa_min(self) -> float:
        return float(1.0 / self.radii.max())

    @property
    def kappa_max(self) -> float:
        return float(1.0 / self.radii.min())

    def spec(self) -> list:
        return [{"center": list(s.center), "radius": s.radius} for s in self.scatterers]

    def locate(self, r):
        """Return ``(scatterer index, boundary angle)`` for arc-length(s) ``r``."""
        r = np.mod(np.asarray(r, dtype=float), self.total_perimeter)
        cum = self.cumulative_arclength
        idx = np.searchsorted(cum, r, side="right") - 1
        idx = np.clip(idx, 0, self.n_scatterers - 1)
        _, _, rad, ref = self._arrays
        theta = ref[idx] + (r - cum[idx]) / rad[idx]
        return idx, theta

    def scatterer_of(self, r) -> np.ndarray:
        return self.locate(r)[0]

    def curvature(self, r) -> np.ndarray:
        return 1.0 / self.radii[self.scatterer_of(r)]

    def canonical_r(self, r, scatterer):
        """Fold arc-length that ran past a circle's seam back onto its arc."""
        cum = self.cumulative_arclength
        scatterer = np.asarray(scatterer)
        per = cum[scatterer + 1] - cum[scatterer]
        return cum[scatterer] + np.mod(np.asarray(r) - cum[scatterer], per)

    def candidates(self, reach: float):
        """CSR candidate list of circles reachable within ``reach`` from each scatterer.

        Returns ``(ptr, index, offset_x, offset_y, lower_bound)``; rows are sorted
        by ``lower_bound``, a lower bound on the free path to that translate.
        """
        cache = self.__dict__.setdefault("_cand_cache", {})
        key = round(float(reach), 12)
        if key in cache:
            return cache[key]
        cx, cy, rad, _ = self._arrays
        ptr = [0]
        cj, cox, coy, clb = [], [], [], []
        for i in range(self.n_scatterers):
            rows = []
            for j in range(self.n_scatterers):
                lim = rad[i] + reach + rad[j]
                m = int(math.ceil(lim)) + 1
                for ox in range(-m, m + 1):
                    for oy in range(-m, m + 1):
                        if i == j and ox == 0 and oy == 0:
                            continue
                        d = math.hypot(cx[j] + ox - cx[i], cy[j] + oy - cy[i])
                        if d <= lim:
                            rows.append((d - rad[i] - rad[j], j, ox, oy))
            rows.sort()
            for lb, j, ox, oy in rows:
                cj.append(j)
                cox.append(float(ox))
                coy.append(float(oy))
                clb.append(lb)
            ptr.append(len(cj))
        out = (np.array(ptr, dtype=np.int64), np.array(cj, dtype=np.int64),
               np.array(cox), np.array(coy), np.array(clb))
        cache[key] = out
        return out

    @cached_property
    def flight_bound(self) -> float:
        """Search reach for the collision map: sampled maximal free path plus 25%."""
        tau = _sample_flights(self, 600, 300, FALLBACK_REACH)
        if np.any(~np.isfinite(tau)):
            return FALLBACK_REACH
        return float(min(1.25 * tau.max() + 0.05, FALLBACK_REACH))


def build_table(specs: Sequence, ref_angles: Optional[Sequence[float]] = None) -> Table:
    """Build a table from ``[(center, radius), ...]`` or ``[{"center":..., "radius":...}]``.

    Raises
    ------
    OverlapError
        If two scatterers, or a scatterer and any lattice translate, intersect or touch.
    """
    if len(specs) == 0:
        raise ValueError("a table needs at least one scatterer")
    scat = []
    for k, s in enumerate(specs):
        if isinstance(s, dict):
            center, radius = s["center"], s["radius"]
        else:
            center, radius = s
        ref = 0.0 if ref_angles is None else float(ref_angles[k])
        scat.append(Scatterer(tuple(center), float(radius), ref))
    for i, a in enumerate(scat):
        if 2.0 * a.radius >= 1.0:
            raise OverlapError(f"scatterer {i} (radius {a.radius}) meets its own lattice translate")
        for j in range(i + 1, len(scat)):
            b = scat[j]
            dx = (a.center[0] - b.center[0] + 0.5) % 1.0 - 0.5
            dy = (a.center[1] - b.center[1] + 0.5) % 1.0 - 0.5
            if math.hypot(dx, dy) <= a.radius + b.radius:
                raise OverlapError(f"scatterers {i} and {j} overlap or touch")
    return Table(tuple(scat))


def default_table() -> Table:
    return build_table(DEFAULT_TABLE_SPEC)


def boundary_point(table: Table, r: float) -> BoundaryFrame:
    idx, theta = table.locate(r)
    idx = int(idx)
    theta = float(theta)
    s = table.scatterers[idx]
    c, sn = math.cos(theta), math.sin(theta)
    pos = ((s.center[0] + s.radius * c) % 1.0, (s.center[1] + s.radius * sn) % 1.0)
    return BoundaryFrame(position=pos, unit_tangent=(-sn, c), inward_normal=(c, sn),
                         curvature=1.0 / s.radius, scatterer=idx)


def _sample_flights(table: Table, n_starts: int, n_directions: int, reach: float) -> np.ndarray:
    """Free path for a grid of launch points x angles; ``inf`` where nothing is hit."""
    r = (np.arange(n_starts) + 0.5) * table.total_perimeter / n_starts
    phi = -0.5 * np.pi + (np.arange(n_directions) + 0.5) * np.pi / n_directions
    rr, pp = np.meshgrid(r, phi, indexing="ij")
    rr, pp = rr.ravel(), pp.ravel()
    src, theta = table.locate(rr)
    n = rr.size
    outs = [np.empty(n) for _ in range(3)] + [np.empty(n, np.int64) for _ in range(3)]
    cx, cy, rad, ref = table._arrays
    ptr, cj, cox, coy, clb = table.candidates(reach)
    _kernels.boundary_step(src.astype(np.int64), theta, pp, cx, cy, rad,
                           table.cumulative_arclength, ref, ptr, cj, cox, coy,
                           clb, reach, 0.0, *outs)
    tau, status = outs[2], outs[5]
    return np.where(status == _kernels.NO_HIT, np.inf, tau).reshape(n_starts, n_directions)


@dataclass(frozen=True)
class Corridor:
    direction: tuple
    offset: float
    width: float


def corridors(table: Table) -> list:
    """Exact list of open corridors (infinite free lines) of a circular table.

    A line with primitive direction ``(p, q)`` is labelled by ``c = q x - p y``
    mod 1; a disk blocks ``|c - c_i| < R_i |(p, q)|``. Once ``R |(p,q)| >= 1/2``
    a single disk blocks everything, so only finitely many directions need
    checking.
    """
    rmax = max(s.radius for s in table.scatterers)
    bound = 1.0 / (2.0 * rmax)
    found = []
    m = int(math.ceil(bound)) + 1
    for p in range(0, m + 1):
        for q in range(-m, m + 1):
            if (p == 0 and q <= 0) or math.gcd(p, abs(q)) != 1:
                continue
            norm = math.hypot(p, q)
            if norm > bound + 1e-12:
                continue
            blocks = []
            for s in table.scatterers:
                c = (q * s.center[0] - p * s.center[1]) % 1.0
                h = s.radius * norm
                blocks.append((c - h, c + h))
            for off, width in _gaps(blocks):
                if width <= 1e-12:
                    # tangent contact, not an open strip
                    continue
                found.append(Corridor(direction=(p, q), offset=off, width=width / norm))
    return found


def _gaps(intervals):
    # uncovered arcs of the unit circle, intervals open
    segs = []
    for a, b in intervals:
        if b - a >= 1.0:
            return []
        a0 = a % 1.0
        b0 = a0 + (b - a)
        segs.append((a0, b0))
        segs.append((a0 - 1.0, b0 - 1.0))
    segs.sort()
    gaps = []
    reach = segs[0][1]
    for a, b in segs[1:]:
        if a > reach:
            lo = reach % 1.0
            gaps.append((lo + (a - reach) / 2.0, a - reach))
        reach = max(reach, b)
    # keep gaps that lie in one period
    out = {}
    for mid, w in gaps:
        key = round(mid % 1.0, 12)
        out[key] = w
    return sorted(out.items())


@dataclass
class HorizonReport:
    n_starts: int
    n_directions: int
    max_flight: float
    tau_min: float
    tau_max: float
    finite_horizon: bool
    corridors: list
    witness: Optional[tuple] = None

    def raise_if_infinite(self):
        if not self.finite_horizon:
            start, phi = self.witness if self.witness else (None, None)
            raise HorizonViolation(
                f"free flight longer than {self.max_flight} from r={start}, phi={phi}",
                start=start, phi=phi)

    def to_dict(self) -> dict:
        return {
            "n_starts": self.n_starts, "n_directions": self.n_directions,
            "max_flight": self.max_flight, "tau_min": self.tau_min,
            "tau_max": self.tau_max, "finite_horizon": self.finite_horizon,
            "corridors": [{"direction": list(c.direction), "offset": c.offset,
                           "width": c.width} for c in self.corridors],
            "witness": list(self.witness) if self.witness else None,
        }


def verify_table(table: Table, n_directions: int = 400, n_starts: int = 2000,
                 max_flight: float = 5.0) -> HorizonReport:
    """Sample free flights on a start x direction grid and look for corridors.

    ``finite_horizon`` is true iff every sampled flight ends within
    ``max_flight``; the analytic corridor list is reported alongside.
    """
    if n_directions < 1 or n_starts < 1:
        raise ValueError("n_directions and n_starts must be >= 1")
    tau = _sample_flights(table, n_starts, n_directions, max_flight)
    finite = np.isfinite(tau)
    witness = None
    if not finite.all():
        i, k = np.argwhere(~finite)[0]
        r = (i + 0.5) * table.total_perimeter / n_starts
        phi = -0.5 * np.pi + (k + 0.5) * np.pi / n_directions
        witness = (float(r), float(phi))
    return HorizonReport(
        n_starts=n_starts, n_directions=n_directions, max_flight=max_flight,
        tau_min=float(tau[finite].min()) if finite.any() else math.inf,
        tau_max=float(tau[finite].max()) if finite.all() else math.inf,
        finite_horizon=bool(finite.all()), corridors=corridors(table),
        witness=witness)
