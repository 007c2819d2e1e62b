"""Exception hierarchy shared by all modules."""


class SinaiHoleError(Exception):
    """Base class for every error raised by the package."""


class OverlapError(SinaiHoleError):
    """Two scatterers (or a scatterer and a lattice translate) intersect or touch."""


class HorizonViolation(SinaiHoleError):
    """A sampled free flight exceeded the allowed length.

    ``start`` is the arc-length of the launch point and ``phi`` the launch angle.
    """

    def __init__(self, message, start=None, phi=None):
        super().__init__(message)
        self.start = start
        self.phi = phi


class NoCollision(SinaiHoleError):
    """No scatterer was hit within the search reach."""


class SingularInput(SinaiHoleError):
    """The point is (numerically) grazing, where the map is not defined."""


class HoleSpansScatterers(SinaiHoleError):
    """The hole interval is not contained in a single scatterer's arc."""


class Extinction(SinaiHoleError):
    """Every particle of an ensemble has escaped."""


class NonStationary(SinaiHoleError):
    """The trailing window of a conditional-mean sequence still shows a trend."""


class MassExtinct(SinaiHoleError):
    """A leaky standard family lost all of its mass."""


class NoDecay(SinaiHoleError):
    """Series terms show no geometric decay before the truncation limit."""


class ConfigError(SinaiHoleError):
    """Invalid experiment configuration."""
