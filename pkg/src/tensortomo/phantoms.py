"""Reproducible test fields: band-limited ensembles and exact phantoms.

Ensemble members are built from closed-form mode functions so the same
seed yields the same continuous field at every grid resolution.
"""

from __future__ import annotations

import numpy as np

from .fields import OneFormField, SymTensorField
from .functions import Bump, Gaussian, PlaneWave, ScalarFunction, Sum
from .geometry import Domain


def _random_mode_sum(rng, band: float, n_modes: int, support: float) -> ScalarFunction:
    """bump * sum of random plane waves with |k| <= band."""
    total = None
    for _ in range(n_modes):
        kr = band * np.sqrt(rng.uniform(0.05, 1.0))
        ka = rng.uniform(0.0, 2.0 * np.pi)
        k = (kr * np.cos(ka), kr * np.sin(ka))
        wave = PlaneWave(k=k, phase=rng.uniform(0, 2 * np.pi),
                         amplitude=rng.normal())
        total = wave if total is None else Sum(total, wave)
    return Bump(radius=support) * total


def band_limited_tensor_functions(rng, band: float = 8.0, n_modes: int = 10,
                                  support: float = 0.85):
    """Three closed-form component functions (f11, f12, f22)."""
    return tuple(_random_mode_sum(rng, band, n_modes, support) for _ in range(3))


def band_limited_tensor(domain: Domain, rng, band: float = 8.0,
                        n_modes: int = 10, support: float = 0.85) -> SymTensorField:
    f11, f12, f22 = band_limited_tensor_functions(rng, band, n_modes, support)
    return SymTensorField.from_functions(domain, f11.value, f12.value,
                                         f22.value, region="M")


def tensor_ensemble(domain: Domain, size: int, seed: int, band: float = 8.0,
                    n_modes: int = 10, support: float = 0.85):
    """Deterministic ensemble; the seed fixes the continuous fields."""
    rng = np.random.default_rng(seed)
    return [band_limited_tensor(domain, rng, band, n_modes, support)
            for _ in range(size)]


def h10_one_form(domain: Domain, rng, band: float = 6.0, n_modes: int = 6,
                 support: float = 0.85) -> OneFormField:
    """A covector field vanishing (to all orders) before the boundary."""
    v1 = _random_mode_sum(rng, band, n_modes, support)
    v2 = _random_mode_sum(rng, band, n_modes, support)
    return OneFormField.from_functions(domain, v1.value, v2.value, region="M")


def stream_phantom(domain: Domain, psi: ScalarFunction | None = None,
                   region: str = "M") -> SymTensorField:
    """Divergence-free tensor from a stream potential (flat metric).

    f11 = d2 d2 psi, f12 = -d1 d2 psi, f22 = d1 d1 psi gives delta f = 0
    identically for the Euclidean metric; the default psi is a Gaussian
    cut by a mollifier so it vanishes to all orders at the boundary.
    """
    if psi is None:
        psi = Gaussian(amplitude=1.0, width=0.5) * Bump(radius=0.95)
    H = psi.hess(domain.grid_points)
    comps = np.stack([H[..., 1, 1], -H[..., 0, 1], H[..., 0, 0]])
    return SymTensorField(comps, domain, region)


def gaussian_component_phantom(domain: Domain, sharpness: float = 8.0) -> SymTensorField:
    """f11 = exp(-sharpness |x|^2), other components zero."""
    g = Gaussian(amplitude=1.0, width=1.0 / np.sqrt(sharpness))
    zero = np.zeros_like(domain.r)
    return SymTensorField(np.stack([g.value(domain.grid_points), zero, zero]),
                          domain, "M")


def metric_tensor_phantom(metric, domain: Domain) -> SymTensorField:
    """f_ij = g_ij on the inner disc (ray integrals are chord lengths)."""
    G = metric.g(domain.grid_points)
    comps = np.stack([G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]])
    return SymTensorField(comps, domain, "M")
