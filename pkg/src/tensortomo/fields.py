"""Symmetric 2-tensor and one-form fields with discrete tensor calculus.

Fields live on the shared Cartesian grid and are zero outside their
validity region (extension by zero is built into storage). The symmetrized
covariant derivative and divergence use central differences, falling back
to one-sided two-point stencils at region edges; the same sparse stencil
matrices back the elliptic solver, so the solenoidal projection is exactly
Galerkin-orthogonal in the discrete inner product defined here.

Frozen norm conventions (all sums over region nodes, cell weight
sqrt(det g) h^2):

* L^2 of a tensor:   sum  f_ij f_kl g^ik g^jl          * weight
* L^2 of a one-form: sum  v_i v_j g^ij                 * weight
* H^1 adds          sum  g^kl (d_k c)^T Q (d_l c)      * weight
  where c are the components, Q the same algebraic contraction as in L^2,
  and d_k the region-aware first differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ._grid import bilinear, pad_region
from .errors import ZeroField
from .geometry import Domain, Metric

_DUP = np.zeros((2, 2, 3))
_DUP[0, 0, 0] = 1.0
_DUP[0, 1, 1] = 1.0
_DUP[1, 0, 1] = 1.0
_DUP[1, 1, 2] = 1.0


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BoundaryTrace:
    """Covector values sampled on a circle, interpolated periodically."""

    radius: float
    angles: np.ndarray        # (m,) in [0, 2 pi)
    values: np.ndarray        # (m, 2)
    interp_error: float = 0.0

    def interp(self, angles: np.ndarray) -> np.ndarray:
        a = np.mod(angles, 2 * np.pi)
        order = np.argsort(self.angles)
        base = self.angles[order]
        vals = self.values[order]
        ext_a = np.concatenate([base, base[:1] + 2 * np.pi])
        ext_v = np.vstack([vals, vals[:1]])
        out = np.empty(a.shape + (2,))
        for c in range(2):
            out[..., c] = np.interp(a, ext_a, ext_v[:, c])
        return out

    def norm_l2(self) -> float:
        """sqrt of the circle average of |w|^2 times circumference."""
        v2 = np.sum(self.values**2, axis=-1)
        return float(np.sqrt(v2.mean() * 2 * np.pi * self.radius))


class _GridField:
    n_comps = 0

    def __init__(self, comps, domain: Domain, region: str = "M",
                 boundary_trace: BoundaryTrace | None = None):
        comps = np.asarray(comps, dtype=float)
        if comps.shape != (self.n_comps, domain.n_side, domain.n_side):
            raise ValueError(f"component array must be {self.n_comps} x grid")
        mask = domain.region_mask(region)
        self.comps = np.where(mask, comps, 0.0)
        self.domain = domain
        self.region = region
        self.boundary_trace = boundary_trace

    # -- algebra ------------------------------------------------------------

    def _like(self, comps):
        return type(self)(comps, self.domain, self.region)

    def __add__(self, other):
        assert self.domain is other.domain
        return self._like(self.comps + other.comps)

    def __sub__(self, other):
        assert self.domain is other.domain
        return self._like(self.comps - other.comps)

    def __mul__(self, a):
        return self._like(self.comps * float(a))

    __rmul__ = __mul__

    def copy(self):
        return self._like(self.comps.copy())

    def restrict(self, region: str):
        return type(self)(self.comps, self.domain, region)

    def interp(self, pts):
        return bilinear(self.domain, self.comps, pts)

    @property
    def quad_comps(self):
        """Components padded past the region edge for ray quadrature.

        Stored components stay exactly zero outside the region; this view
        only smooths the sampling band between the outermost region nodes
        and the bounding circle.
        """
        if not hasattr(self, "_quad_comps"):
            self._quad_comps = pad_region(
                self.comps, self.domain.region_mask(self.region))
        return self._quad_comps

    @classmethod
    def zeros(cls, domain: Domain, region: str = "M"):
        return cls(np.zeros((cls.n_comps, domain.n_side, domain.n_side)),
                   domain, region)


class SymTensorField(_GridField):
    """Components (f11, f12, f22); f12 = f21 by storage."""

    n_comps = 3

    def full(self):
        """(n, n, 2, 2) symmetric matrices."""
        out = np.empty(self.comps.shape[1:] + (2, 2))
        out[..., 0, 0] = self.comps[0]
        out[..., 0, 1] = out[..., 1, 0] = self.comps[1]
        out[..., 1, 1] = self.comps[2]
        return out

    @classmethod
    def from_functions(cls, domain: Domain, f11, f12, f22, region="M"):
        pts = domain.grid_points
        return cls(np.stack([f(pts) for f in (f11, f12, f22)]), domain, region)


class OneFormField(_GridField):
    n_comps = 2

    @classmethod
    def from_functions(cls, domain: Domain, v1, v2, region="M"):
        pts = domain.grid_points
        return cls(np.stack([v1(pts), v2(pts)]), domain, region)

    def trace_on_circle(self, radius: float, n: int = 256) -> BoundaryTrace:
        """Bilinear trace on a circle, with a recorded interpolation bound."""
        ang = 2 * np.pi * np.arange(n) / n
        pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        vals = self.interp(pts).T
        h = self.domain.h
        # curvature bound from second differences, standard h^2/8 estimate
        lap = np.abs(np.diff(self.comps, n=2, axis=1)).max() + \
            np.abs(np.diff(self.comps, n=2, axis=2)).max()
        err = 0.125 * lap  # second differences already carry h^2
        return BoundaryTrace(radius, ang, vals, interp_error=float(err))


# ---------------------------------------------------------------------------
# stencil machinery (shared with the elliptic solver)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _region_ids(domain: Domain, region: str):
    mask = domain.region_mask(region)
    ids = np.full(mask.shape, -1, dtype=np.int64)
    ids[mask] = np.arange(int(mask.sum()))
    return ids, mask


@lru_cache(maxsize=96)
def diff_matrix(domain: Domain, region: str, axis: int,
                mode: str = "central") -> sp.csr_matrix:
    """Sparse d/dx_axis over region nodes.

    mode="central": central differences where both neighbors lie in the
    region, one-sided at region edges. mode="forward"/"backward": the
    corresponding one-sided stencil, falling back to the other side at
    edges (so forward + backward = 2 * central everywhere).
    """
    ids, mask = _region_ids(domain, region)
    n = int(mask.sum())
    h = domain.h

    shift = np.zeros(2, dtype=int)
    shift[axis] = 1

    def neighbor_ids(sign):
        rolled = np.roll(ids, -sign * shift, axis=(0, 1))
        # rolling wraps; the wrapped ring is exterior (-1) for our radii,
        # but mask it explicitly for safety
        edge = np.zeros_like(mask)
        if axis == 0:
            edge[-1 if sign > 0 else 0, :] = True
        else:
            edge[:, -1 if sign > 0 else 0] = True
        out = np.where(edge, -1, rolled)
        return out[mask]

    me = ids[mask]
    plus = neighbor_ids(+1)
    minus = neighbor_ids(-1)
    has_p, has_m = plus >= 0, minus >= 0

    if mode == "central":
        use_c = has_p & has_m
        use_p = has_p & ~has_m
        use_m = has_m & ~has_p
    elif mode == "forward":
        use_c = np.zeros_like(has_p)
        use_p = has_p
        use_m = has_m & ~has_p
    elif mode == "backward":
        use_c = np.zeros_like(has_p)
        use_m = has_m
        use_p = has_p & ~has_m
    else:
        raise ValueError(f"unknown diff mode {mode!r}")

    rows, cols, vals = [], [], []
    rows += [me[use_c], me[use_c]]
    cols += [plus[use_c], minus[use_c]]
    vals += [np.full(use_c.sum(), 0.5 / h), np.full(use_c.sum(), -0.5 / h)]

    rows += [me[use_p], me[use_p]]
    cols += [plus[use_p], me[use_p]]
    vals += [np.full(use_p.sum(), 1.0 / h), np.full(use_p.sum(), -1.0 / h)]

    rows += [me[use_m], me[use_m]]
    cols += [me[use_m], minus[use_m]]
    vals += [np.full(use_m.sum(), 1.0 / h), np.full(use_m.sum(), -1.0 / h)]

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=32)
def _metric_tables(metric: Metric, domain: Domain, region: str):
    """Per-node metric data on region nodes: Gamma, ginv, weights, Grams."""
    _, mask = _region_ids(domain, region)
    pts = domain.points(mask)
    Gam = metric.christoffel(pts)
    gi = metric.ginv(pts)
    w = metric.sqrt_det(pts) * domain.h**2
    full4 = np.einsum("...ik,...jl->...ijkl", gi, gi)
    Q3 = np.einsum("ija,...ijkl,klb->...ab", _DUP, full4, _DUP)
    return Gam, gi, w, Q3


@lru_cache(maxsize=96)
def sym_d_matrix(metric: Metric, domain: Domain, region: str,
                 mode: str = "central") -> sp.csr_matrix:
    """Sparse symmetrized covariant derivative: (2N,) -> (3N,)."""
    D1 = diff_matrix(domain, region, 0, mode)
    D2 = diff_matrix(domain, region, 1, mode)
    Gam, _, _, _ = _metric_tables(metric, domain, region)

    def dia(values):
        return sp.diags(values)

    # (dv)_11 = d1 v1 - Gamma^k_11 v_k, etc.
    blocks = [
        [D1 - dia(Gam[:, 0, 0, 0]), -dia(Gam[:, 1, 0, 0])],
        [0.5 * D2 - dia(Gam[:, 0, 0, 1]), 0.5 * D1 - dia(Gam[:, 1, 0, 1])],
        [-dia(Gam[:, 0, 1, 1]), D2 - dia(Gam[:, 1, 1, 1])],
    ]
    return sp.bmat(blocks, format="csr")


def _flat(field: _GridField, region: str):
    _, mask = _region_ids(field.domain, region)
    return field.comps[:, mask].reshape(-1)


def _unflat(cls, flat, domain: Domain, region: str):
    _, mask = _region_ids(domain, region)
    comps = np.zeros((cls.n_comps, domain.n_side, domain.n_side))
    per = int(mask.sum())
    for c in range(cls.n_comps):
        comps[c][mask] = flat[c * per:(c + 1) * per]
    return cls(comps, domain, region)


# ---------------------------------------------------------------------------
# public operators
# ---------------------------------------------------------------------------

def sym_d(metric: Metric, v: OneFormField, region: str | None = None) -> SymTensorField:
    """(dv)_ij = (d_i v_j + d_j v_i)/2 - Gamma^k_ij v_k on the grid."""
    region = region or v.region
    D = sym_d_matrix(metric, v.domain, region)
    out = D @ _flat(v, region)
    return _unflat(SymTensorField, out, v.domain, region)


def divergence(metric: Metric, f: SymTensorField, region: str | None = None) -> OneFormField:
    """(delta f)_j = g^{ik} (d_k f_ij - Gamma^l_{ki} f_lj - Gamma^l_{kj} f_il)."""
    region = region or f.region
    domain = f.domain
    ids, mask = _region_ids(domain, region)
    n = int(mask.sum())
    D = [diff_matrix(domain, region, a) for a in range(2)]
    Gam, gi, _, _ = _metric_tables(metric, domain, region)

    comp_idx = np.array([[0, 1], [1, 2]])
    fm = np.stack([f.comps[c][mask] for c in range(3)])      # (3, n)
    df = np.stack([[D[a] @ fm[c] for c in range(3)] for a in range(2)])

    out = np.zeros((2, n))
    for j in range(2):
        for i in range(2):
            for k in range(2):
                out[j] += gi[:, i, k] * df[k, comp_idx[i, j]]
                for l in range(2):
                    out[j] -= gi[:, i, k] * (
                        Gam[:, l, k, i] * fm[comp_idx[l, j]]
                        + Gam[:, l, k, j] * fm[comp_idx[i, l]])
    comps = np.zeros((2, domain.n_side, domain.n_side))
    for c in range(2):
        comps[c][mask] = out[c]
    return OneFormField(comps, domain, region)


def _contract_sq(field: _GridField, gi, Q3, mask):
    c = field.comps[:, mask]
    if field.n_comps == 3:
        return np.einsum("an,nab,bn->n", c, Q3, c)
    return np.einsum("an,nab,bn->n", c, gi, c)


def norm_l2(metric: Metric, field: _GridField, region: str | None = None) -> float:
    """Discrete L^2 norm over a region (see module docstring)."""
    region = region or field.region
    _, mask = _region_ids(field.domain, region)
    _, gi, w, Q3 = _metric_tables(metric, field.domain, region)
    return float(np.sqrt(np.sum(w * _contract_sq(field, gi, Q3, mask))))


def norm_h1(metric: Metric, field: _GridField, region: str | None = None) -> float:
    """Discrete H^1 norm: L^2 plus metric-contracted first differences."""
    region = region or field.region
    domain = field.domain
    _, mask = _region_ids(domain, region)
    Gam, gi, w, Q3 = _metric_tables(metric, domain, region)
    D = [diff_matrix(domain, region, a) for a in range(2)]

    c = field.comps[:, mask]
    total = np.sum(w * _contract_sq(field, gi, Q3, mask))
    Q = Q3 if field.n_comps == 3 else gi
    dc = np.stack([[D[a] @ c[i] for i in range(field.n_comps)]
                   for a in range(2)])                         # (2, C, n)
    total += np.sum(w * np.einsum("nkl,kan,nab,lbn->n", gi, dc, Q, dc))
    return float(np.sqrt(total))


def korn_ratio(metric: Metric, w_field: OneFormField, region: str | None = None) -> float:
    """||w||_H1 / (||dw||_L2 + ||w||_L2), the Korn-inequality probe."""
    region = region or w_field.region
    l2 = norm_l2(metric, w_field, region)
    if l2 == 0.0:
        raise ZeroField("korn_ratio needs a nonzero field")
    dw = sym_d(metric, w_field, region)
    return norm_h1(metric, w_field, region) / (norm_l2(metric, dw, region) + l2)


def inner_l2(metric: Metric, a: _GridField, b: _GridField,
             region: str | None = None) -> float:
    """Discrete L^2 pairing with the same weights as norm_l2."""
    region = region or a.region
    _, mask = _region_ids(a.domain, region)
    Gam, gi, w, Q3 = _metric_tables(metric, a.domain, region)
    ca, cb = a.comps[:, mask], b.comps[:, mask]
    Q = Q3 if a.n_comps == 3 else gi
    return float(np.sum(w * np.einsum("an,nab,bn->n", ca, Q, cb)))


# ---------------------------------------------------------------------------
# FIELD v1 text dumps
# ---------------------------------------------------------------------------

_KIND = {SymTensorField: "tensor", OneFormField: "oneform"}
_KIND_REV = {"tensor": SymTensorField, "oneform": OneFormField}


def dump_field(field: _GridField, path) -> None:
    """Write the FIELD v1 text format (one line per node, 17 digits)."""
    d = field.domain
    with open(path, "w") as fh:
        fh.write(f"FIELD v1 {_KIND[type(field)]} {d.n_side} {d.n_side} "
                 f"{d.h:.17g} {d.radius_M:.17g} {d.radius_M1:.17g}\n")
        flags = d.region_flag
        for ix in range(d.n_side):
            for iy in range(d.n_side):
                vals = " ".join(f"{field.comps[c, ix, iy]:.17g}"
                                for c in range(field.n_comps))
                fh.write(f"{ix} {iy} {flags[ix, iy]} {vals}\n")


def load_field(path):
    """Read a FIELD v1 dump; reconstructs the domain from the header."""
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["FIELD", "v1"]:
            raise ValueError("not a FIELD v1 file")
        kind, nx, ny = head[2], int(head[3]), int(head[4])
        h, r_m, r_m1 = float(head[5]), float(head[6]), float(head[7])
        domain = Domain(radius_M=r_m, radius_M1=r_m1, h=h)
        if domain.n_side != nx:
            raise ValueError("header grid size inconsistent with spacing")
        cls = _KIND_REV[kind]
        comps = np.zeros((cls.n_comps, nx, ny))
        for line in fh:
            parts = line.split()
            ix, iy = int(parts[0]), int(parts[1])
            for c in range(cls.n_comps):
                comps[c, ix, iy] = float(parts[3 + c])
    return cls(comps, domain, "M1")
