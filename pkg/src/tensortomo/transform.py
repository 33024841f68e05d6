"""The geodesic ray transform over a boundary fan.

Each fan entry (x, omega) carries the integral of f_ij gdot^i gdot^j along
the maximal geodesic from (x, omega), computed by composite Simpson with
bilinear interpolation of the grid field. The mu-weighted pairing makes
the transform a bounded map into L^2 of the inward sphere bundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FanMismatch
from .fields import SymTensorField
from .geodesics import BoundaryFan, geodesic_integrals
from .geometry import Metric


@dataclass(eq=False)
class RayData:
    """Values of the ray transform over a boundary fan."""

    fan: BoundaryFan
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.fan),):
            raise ValueError("one value per fan entry required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ray transform values must be finite")


def transform(metric: Metric, f: SymTensorField, fan: BoundaryFan,
              step: float = 1e-3) -> RayData:
    """Geodesic ray transform of f over every fan entry."""
    ints, _ = geodesic_integrals(metric, f.domain, fan.points, fan.dirs,
                                 fan.radius, step, [f.quad_comps])
    return RayData(fan, ints[0])


def transform_many(metric: Metric, fields, fan: BoundaryFan,
                   step: float = 1e-3):
    """Transform several fields along one shared set of rays."""
    ints, _ = geodesic_integrals(metric, fields[0].domain, fan.points,
                                 fan.dirs, fan.radius, step,
                                 [f.quad_comps for f in fields])
    return [RayData(fan, row) for row in ints]


def inner_mu(a: RayData, b: RayData) -> float:
    """The dmu-weighted inner product sum_k a_k b_k w_mu(k)."""
    if a.fan is not b.fan:
        same = (a.fan.points.shape == b.fan.points.shape
                and np.array_equal(a.fan.points, b.fan.points)
                and np.array_equal(a.fan.dirs, b.fan.dirs))
        if not same:
            raise FanMismatch("ray data live on different fans")
    return float(np.sum(a.values * b.values * a.fan.w_mu))


def norm_mu(a: RayData) -> float:
    return float(np.sqrt(inner_mu(a, a)))


def dump_raydata(data: RayData, path) -> None:
    """CSV dump: x1, x2, omega1, omega2, weight_sigma, weight_mu, value."""
    fan = data.fan
    with open(path, "w") as fh:
        fh.write("x1,x2,omega1,omega2,weight_sigma,weight_mu,value\n")
        for k in range(len(fan)):
            row = (fan.points[k, 0], fan.points[k, 1], fan.dirs[k, 0],
                   fan.dirs[k, 1], fan.w_sigma[k], fan.w_mu[k], data.values[k])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
