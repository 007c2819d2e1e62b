"""Experiment configuration: schema, defaults, YAML loading and hashing."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import observables
from .errors import ConfigError
from .families import DELTA_STAR, K0, K_MAX_STRIP, MASS_FLOOR, MAX_PAIRS
from .geometry import DEFAULT_TABLE_SPEC
from .response import K_MAX, N_PHI_NODES


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScattererSpec(_Strict):
    """One disk: center in torus units and radius."""

    center: List[float] = Field(min_length=2, max_length=2)
    radius: float = Field(gt=0)
    ref_angle: float = 0.0


def _default_table():
    return [ScattererSpec(center=list(c), radius=r) for c, r in DEFAULT_TABLE_SPEC]


class HoleConfig(_Strict):
    """Hole center ``r_star`` (arc-length) and the sizes ``t`` to sweep."""

    r_star: float = 0.5
    t_list: List[float] = Field(default_factory=lambda: [0.04, 0.02, 0.01])

    @field_validator("t_list")
    @classmethod
    def _t_range(cls, v):
        if not v:
            raise ValueError("t_list must not be empty")
        if any(t < 0 for t in v):
            raise ValueError("hole sizes must be >= 0")
        return v


class MCConfig(_Strict):
    """Monte Carlo ensemble size, number of map steps and master seed."""

    n_particles: int = Field(default=10 ** 6, ge=1)
    n_steps: int = Field(default=60, ge=1)
    seed: int = Field(default=0, ge=0)


class QuadratureConfig(_Strict):
    """Node counts for the response-series line integrals and the mu0 rule."""

    n_phi_nodes: int = Field(default=N_PHI_NODES, ge=64)
    n_r_nodes: int = Field(default=512, ge=8)


class SeriesConfig(_Strict):
    """Truncation of the response series."""

    tail_tol: float = Field(default=1e-3, ge=0)
    K_max: int = Field(default=K_MAX, ge=5)


class FamilyConfig(_Strict):
    """Standard-family evolution parameters and the diagnostics sweep."""

    delta_star: float = Field(default=DELTA_STAR, gt=0)
    k0: int = Field(default=K0, ge=2)
    k_max_strip: int = K_MAX_STRIP
    mass_floor: float = Field(default=MASS_FLOOR, ge=0)
    max_pairs: int = Field(default=MAX_PAIRS, ge=16)
    r_values: List[float] = Field(default_factory=lambda: [0.3, 1.1])
    t_values: List[float] = Field(default_factory=lambda: [0.0, 0.01])
    n_generations: int = Field(default=30, ge=1)
    mixing_steps: int = Field(default=6, ge=3)

    @model_validator(mode="after")
    def _strips(self):
        if self.k_max_strip < self.k0:
            raise ValueError(f"k_max_strip={self.k_max_strip} must be >= k0={self.k0}")
        if len(self.r_values) != 2:
            raise ValueError("r_values must hold exactly two source lines")
        return self


class ExperimentConfig(_Strict):
    """Full experiment description. Every field has a default."""

    table: List[ScattererSpec] = Field(default_factory=_default_table)
    hole: HoleConfig = Field(default_factory=HoleConfig)
    observables: List[Union[str, dict]] = Field(default_factory=lambda: ["cos_r"])
    mc: MCConfig = Field(default_factory=MCConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    series: SeriesConfig = Field(default_factory=SeriesConfig)
    family: FamilyConfig = Field(default_factory=FamilyConfig)

    @field_validator("observables")
    @classmethod
    def _known(cls, v):
        if not v:
            raise ValueError("at least one observable is required")
        for name in v:
            try:
                observables.get(name)
            except ConfigError as exc:
                raise ValueError(str(exc)) from None
        return v

    def observable_objects(self):
        return [observables.get(o) for o in self.observables]

    def table_specs(self):
        return [(tuple(s.center), s.radius) for s in self.table]

    def ref_angles(self):
        return [s.ref_angle for s in self.table]

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        return self.model_copy(update={"mc": self.mc.model_copy(update={"seed": seed})})


def load_config(source=None) -> ExperimentConfig:
    """Build a config from a YAML path, a mapping, or defaults when ``None``.

    Raises ``ConfigError`` with the validation messages on bad input.
    """
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(msgs) from None
