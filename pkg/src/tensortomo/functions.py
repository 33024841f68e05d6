"""Closed-form scalar and matrix-valued functions on the plane.

Everything that parametrizes a metric or a phantom carries analytic first
and second derivatives, so Christoffel symbols and curvature never rely on
numerical differentiation of the metric. Points are arrays of shape
(..., 2); values broadcast accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScalarFunction:
    """Interface: value(pts), grad(pts) -> (...,2), hess(pts) -> (...,2,2)."""

    def value(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __mul__(self, other):
        if isinstance(other, ScalarFunction):
            return Product(self, other)
        return Scaled(self, float(other))

    __rmul__ = __mul__

    def __add__(self, other):
        return Sum(self, other)


@dataclass
class Constant(ScalarFunction):
    c: float = 1.0

    def value(self, pts):
        return np.full(pts.shape[:-1], self.c)

    def grad(self, pts):
        return np.zeros(pts.shape[:-1] + (2,))

    def hess(self, pts):
        return np.zeros(pts.shape[:-1] + (2, 2))


@dataclass
class Gaussian(ScalarFunction):
    """amplitude * exp(-|x - center|^2 / width^2)."""

    amplitude: float = 1.0
    width: float = 1.0
    center: tuple = (0.0, 0.0)

    def _u(self, pts):
        return pts - np.asarray(self.center)

    def value(self, pts):
        u = self._u(pts)
        return self.amplitude * np.exp(-np.sum(u * u, axis=-1) / self.width**2)

    def grad(self, pts):
        u = self._u(pts)
        v = self.value(pts)
        return v[..., None] * (-2.0 * u / self.width**2)

    def hess(self, pts):
        u = self._u(pts)
        v = self.value(pts)
        w2 = self.width**2
        outer = np.einsum("...i,...j->...ij", u, u)
        eye = np.eye(2)
        return v[..., None, None] * (4.0 * outer / w2**2 - 2.0 * eye / w2)


@dataclass
class Bump(ScalarFunction):
    """Smooth compactly supported bump: exp(1 - 1/(1 - r^2/R^2)) for r < R.

    Vanishes to all orders at r = R, so one-forms built from it are honest
    H^1_0 elements of any disc of radius >= R.
    """

    radius: float = 0.85
    amplitude: float = 1.0
    center: tuple = (0.0, 0.0)
    _floor: float = field(default=0.02, repr=False)

    def _parts(self, pts):
        u0 = pts - np.asarray(self.center)
        s = np.sum(u0 * u0, axis=-1) / self.radius**2
        w = 1.0 - s                       # support: w > 0
        inside = w > self._floor          # values below exp(1 - 50) are dropped
        wsafe = np.where(inside, w, 1.0)
        val = np.where(inside, self.amplitude * np.exp(1.0 - 1.0 / wsafe), 0.0)
        return u0, wsafe, inside, val

    def value(self, pts):
        return self._parts(pts)[3]

    def grad(self, pts):
        u0, w, inside, val = self._parts(pts)
        # d/dx exp(1 - 1/w) = val * (1/w^2) * dw/dx, dw/dx = -2 x / R^2
        fac = np.where(inside, -2.0 / (w * w * self.radius**2), 0.0)
        return (val * fac)[..., None] * u0

    def hess(self, pts):
        u0, w, inside, val = self._parts(pts)
        r2 = self.radius**2
        a = np.where(inside, -2.0 / (w * w * r2), 0.0)       # grad = val*a*u
        outer = np.einsum("...i,...j->...ij", u0, u0)
        # d(a)/dx_j = (-8 / (w^3 R^4)) * x_j  (since dw/dx_j = -2 x_j / R^2)
        da = np.where(inside, -8.0 / (w**3 * r2 * r2), 0.0)
        eye = np.eye(2)
        h = (
            (val * a * a)[..., None, None] * outer
            + val[..., None, None] * (da[..., None, None] * outer + (a)[..., None, None] * eye)
        )
        return h


@dataclass
class PlaneWave(ScalarFunction):
    """amplitude * cos(k . x + phase)."""

    k: tuple = (1.0, 0.0)
    phase: float = 0.0
    amplitude: float = 1.0

    def _arg(self, pts):
        k = np.asarray(self.k)
        return pts @ k + self.phase

    def value(self, pts):
        return self.amplitude * np.cos(self._arg(pts))

    def grad(self, pts):
        k = np.asarray(self.k)
        return (-self.amplitude * np.sin(self._arg(pts)))[..., None] * k

    def hess(self, pts):
        k = np.asarray(self.k)
        kk = np.outer(k, k)
        return (-self.amplitude * np.cos(self._arg(pts)))[..., None, None] * kk


@dataclass
class Scaled(ScalarFunction):
    f: ScalarFunction
    a: float

    def value(self, pts):
        return self.a * self.f.value(pts)

    def grad(self, pts):
        return self.a * self.f.grad(pts)

    def hess(self, pts):
        return self.a * self.f.hess(pts)


@dataclass
class Sum(ScalarFunction):
    f: ScalarFunction
    g: ScalarFunction

    def value(self, pts):
        return self.f.value(pts) + self.g.value(pts)

    def grad(self, pts):
        return self.f.grad(pts) + self.g.grad(pts)

    def hess(self, pts):
        return self.f.hess(pts) + self.g.hess(pts)


@dataclass
class Product(ScalarFunction):
    f: ScalarFunction
    g: ScalarFunction

    def value(self, pts):
        return self.f.value(pts) * self.g.value(pts)

    def grad(self, pts):
        return (
            self.f.grad(pts) * self.g.value(pts)[..., None]
            + self.f.value(pts)[..., None] * self.g.grad(pts)
        )

    def hess(self, pts):
        fv, gv = self.f.value(pts), self.g.value(pts)
        fg, gg = self.f.grad(pts), self.g.grad(pts)
        cross = np.einsum("...i,...j->...ij", fg, gg)
        return (
            self.f.hess(pts) * gv[..., None, None]
            + cross + np.swapaxes(cross, -1, -2)
            + fv[..., None, None] * self.g.hess(pts)
        )


class SymMatrixFunction:
    """Symmetric-matrix-valued map with first and second derivatives.

    value(pts) -> (...,2,2); d(pts) -> (...,2,2,2) indexed [k,i,j] = d_k h_ij;
    d2(pts) -> (...,2,2,2,2) indexed [k,l,i,j].
    """

    def value(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def d(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def d2(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ScalarTimesMatrix(SymMatrixFunction):
    """h_ij(x) = phi(x) * S_ij with S a constant symmetric matrix."""

    phi: ScalarFunction
    S: np.ndarray

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if not np.allclose(self.S, self.S.T):
            raise ValueError("S must be symmetric")

    def value(self, pts):
        return self.phi.value(pts)[..., None, None] * self.S

    def d(self, pts):
        return self.phi.grad(pts)[..., :, None, None] * self.S

    def d2(self, pts):
        return self.phi.hess(pts)[..., :, :, None, None] * self.S


@dataclass
class MatrixSum(SymMatrixFunction):
    terms: list

    def value(self, pts):
        return sum(t.value(pts) for t in self.terms)

    def d(self, pts):
        return sum(t.d(pts) for t in self.terms)

    def d2(self, pts):
        return sum(t.d2(pts) for t in self.terms)
