"""Observables on the collision space, evaluated on arrays of ``(r, phi)``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Observable:
    """Named C^1 function of ``(r, phi)``.

    ``func(perimeter, r, phi)`` must accept arrays. ``sup_norm`` and
    ``lipschitz`` are bounds used in error budgets.
    """

    name: str
    func: Callable
    sup_norm: float
    lipschitz: float
    is_constant: bool = False

    def __call__(self, table, r, phi):
        r = np.asarray(r, dtype=float)
        phi = np.asarray(phi, dtype=float)
        out = self.func(table.total_perimeter, r, phi)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(r, phi).shape)


def const(value: float = 1.0) -> Observable:
    return Observable("const" if value == 1.0 else f"const({value})",
                      lambda P, r, p: np.full(np.broadcast(r, p).shape, float(value)),
                      abs(float(value)), 0.0, is_constant=True)


def harmonic(m: int, n: int) -> Observable:
    """``cos(2 pi m r / |dD|) cos(phi)^n``."""
    lip_r = 2 * math.pi * abs(m)
    return Observable(f"harmonic({m},{n})",
                      lambda P, r, p: np.cos(2 * np.pi * m * r / P) * np.cos(p) ** n,
                      1.0, lip_r + n, is_constant=(m == 0 and n == 0))


SIN_PHI = Observable("sin_phi", lambda P, r, p: np.sin(p), 1.0, 1.0)
COS_R = Observable("cos_r", lambda P, r, p: np.cos(2 * np.pi * r / P), 1.0, 2 * math.pi)
COS2_PHI = Observable("cos2_phi", lambda P, r, p: np.cos(p) ** 2, 1.0, 1.0)
PHI = Observable("phi", lambda P, r, p: p, math.pi / 2, 1.0)

BUILTINS = {
    "const": const(),
    "sin_phi": SIN_PHI,
    "cos_r": COS_R,
    "cos2_phi": COS2_PHI,
    "phi": PHI,
}


def get(name) -> Observable:
    """Look up a built-in by name, or ``harmonic(m,n)`` / a ``{"harmonic": [m, n]}`` dict."""
    if isinstance(name, Observable):
        return name
    if isinstance(name, dict) and "harmonic" in name:
        m, n = name["harmonic"]
        return harmonic(int(m), int(n))
    if isinstance(name, str):
        if name in BUILTINS:
            return BUILTINS[name]
        s = name.replace(" ", "")
        if s.startswith("harmonic(") and s.endswith(")"):
            try:
                m, n = (int(v) for v in s[9:-1].split(","))
            except ValueError:
                pass
            else:
                return harmonic(m, n)
    raise ConfigError(f"unknown observable {name!r}; built-ins: "
                      f"{', '.join(sorted(BUILTINS))}, harmonic(m,n)")
