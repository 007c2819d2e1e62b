"""Open Sinai billiards: collision map, holes, standard families and linear response."""
from .errors import (ConfigError, Extinction, HoleSpansScatterers, HorizonViolation, MassExtinct,
                     NoCollision, NoDecay, NonStationary, OverlapError, SinaiHoleError,
                     SingularInput)
from .geometry import Scatterer, Table, boundary_point, build_table, default_table, verify_table
from .billiard_map import PhasePoint, differential, inverse_map, iterate, next_collision
from .open_system import Hole, make_hole, sample_mu0, simulate
from .response import finite_difference_derivative, linear_response, response_series
from .families import evolve_family, mixing_diagnostic, vertical_line_family

__all__ = [
    "ConfigError", "Extinction", "HoleSpansScatterers", "HorizonViolation", "MassExtinct",
    "NoCollision", "NoDecay", "NonStationary", "OverlapError", "SinaiHoleError", "SingularInput",
    "Scatterer", "Table", "boundary_point", "build_table", "default_table", "verify_table",
    "PhasePoint", "differential", "inverse_map", "iterate", "next_collision",
    "Hole", "make_hole", "sample_mu0", "simulate",
    "finite_difference_derivative", "linear_response", "response_series",
    "evolve_family", "mixing_diagnostic", "vertical_line_family",
]
