"""Numerical laboratory for the geodesic ray transform of symmetric
2-tensor fields on simple 2D Riemannian discs."""

from .geometry import (ConformalMetric, Domain, EuclideanMetric, Metric,
                       PerturbedMetric, SimplicityReport, certify_simple,
                       make_metric, metric_c3_distance)
from .geodesics import (BoundaryFan, GeodesicPath, TwoPointSolution,
                        boundary_fan, trace, two_point, two_point_batch)
from .fields import (BoundaryTrace, OneFormField, SymTensorField, divergence,
                     dump_field, inner_l2, korn_ratio, load_field, norm_h1,
                     norm_l2, sym_d)
from .elliptic import (DivergenceSource, neg_h1_norm, solenoidal_project,
                       solve_dirichlet)

__version__ = "0.1.0"
