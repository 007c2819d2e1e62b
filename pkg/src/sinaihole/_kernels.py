"""Compiled inner loops for ray/circle collisions on the torus.

Scatterer geometry is passed as flat arrays. Candidate translates are stored
CSR-style per source scatterer: ``ptr[i]:ptr[i+1]`` indexes the circles that a
flight leaving scatterer ``i`` may reach.
"""
import math

import numpy as np
from numba import njit

OK = 0
GRAZING_OUT = 1  # image is grazing (|cos phi1| below tolerance)
NO_HIT = 2
SINGULAR_IN = 3  # input angle is grazing

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _nearest_hit(px, py, vx, vy, cx, cy, rad, lo, hi, cj, cox, coy, clb, reach):
    # candidates are sorted by the lower bound clb on their hit distance
    best = reach
    bi = -1
    for c in range(lo, hi):
        if clb[c] >= best:
            break
        j = cj[c]
        wx = px - (cx[j] + cox[c])
        wy = py - (cy[j] + coy[c])
        b = wx * vx + wy * vy
        if b >= 0.0:
            continue
        cc = wx * wx + wy * wy - rad[j] * rad[j]
        disc = b * b - cc
        if disc <= 0.0:
            continue
        s = cc / (-b + math.sqrt(disc))
        if s > 0.0 and s < best:
            best = s
            bi = c
    return bi, best


@njit(cache=True)
def _reflect(px, py, vx, vy, s, c, cx, cy, rad, cj, cox, coy, cum, ref):
    j = cj[c]
    qx = cx[j] + cox[c]
    qy = cy[j] + coy[c]
    hx = px + s * vx
    hy = py + s * vy
    nx = (hx - qx) / rad[j]
    ny = (hy - qy) / rad[j]
    nrm = math.hypot(nx, ny)
    nx /= nrm
    ny /= nrm
    # sin(phi1) = v.T1 with T1 = (-ny, nx); cos(phi1) = -v.n1
    sphi = -vx * ny + vy * nx
    cphi = -(vx * nx + vy * ny)
    phi1 = math.atan2(sphi, cphi)
    ang = math.atan2(ny, nx) - ref[j]
    ang = ang % TWO_PI
    if ang >= TWO_PI:
        ang -= TWO_PI
    r1 = cum[j] + rad[j] * ang
    if r1 >= cum[j + 1]:
        # an angle just below 2 pi can round onto the next circle's origin
        r1 = cum[j]
    return j, r1, phi1, cphi


@njit(cache=True)
def boundary_step(src, theta, phi, cx, cy, rad, cum, ref, ptr, cj, cox, coy,
                  clb, reach, graze_tol, r1, phi1, tau, hit, target, status):
    """Map collision coordinates one step; results written into output arrays."""
    n = src.shape[0]
    half_pi = 0.5 * math.pi
    for k in range(n):
        if half_pi - abs(phi[k]) < graze_tol:
            status[k] = SINGULAR_IN
            r1[k] = np.nan
            phi1[k] = np.nan
            tau[k] = np.nan
            hit[k] = -1
            target[k] = -1
            continue
        i = src[k]
        th = theta[k]
        px = cx[i] + rad[i] * math.cos(th)
        py = cy[i] + rad[i] * math.sin(th)
        a = th + phi[k]
        vx = math.cos(a)
        vy = math.sin(a)
        c, s = _nearest_hit(px, py, vx, vy, cx, cy, rad, ptr[i], ptr[i + 1],
                            cj, cox, coy, clb, reach)
        if c < 0:
            status[k] = NO_HIT
            r1[k] = np.nan
            phi1[k] = np.nan
            tau[k] = np.nan
            hit[k] = -1
            target[k] = -1
            continue
        j, rr, pp, cphi = _reflect(px, py, vx, vy, s, c, cx, cy, rad, cj, cox,
                                   coy, cum, ref)
        r1[k] = rr
        phi1[k] = pp
        tau[k] = s
        hit[k] = j
        target[k] = c
        status[k] = GRAZING_OUT if cphi < graze_tol else OK


@njit(cache=True)
def point_flight(px, py, vx, vy, cx, cy, rad, cj, cox, coy, clb, reach):
    """Nearest hit for a single ray against an explicit candidate list."""
    return _nearest_hit(px, py, vx, vy, cx, cy, rad, 0, cj.shape[0], cj, cox,
                        coy, clb, reach)
