"""Dirichlet solver for the operator delta d and the solenoidal projection.

The weak form (dw, d phi) = F(phi) is discretized with the same sparse
stencil matrix and nodal inner product as the public operators in
``fields``, so the projection f = f^s + dv is exactly orthogonal in the
discrete pairing. Nodes within h/2 inside the bounding circle are
constrained to interpolated boundary values; the rest are free unknowns.

Sources are linear functionals: either a pointwise one-form u acting as
phi -> -(u, phi)_L2, or ``DivergenceSource(F)`` acting as phi -> (F, d phi),
which is how the distributional divergence of a tensor acts. Arbitrary
H^-1 sources beyond these two shapes are not supported.

The assembled system is SPD (discrete Korn plus the Dirichlet pinning) and
is solved by a cached sparse factorization; every solve verifies the
relative residual against the 1e-10 contract and raises NonConvergence on
failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergence
from .fields import (BoundaryTrace, OneFormField, SymTensorField, _flat,
                     _metric_tables, _region_ids, _unflat, diff_matrix,
                     sym_d_matrix)
from .geometry import Domain, Metric


@dataclass(eq=False)
class DivergenceSource:
    """Right-hand side u = delta F, represented by its action (F, d phi)."""

    F: SymTensorField


@lru_cache(maxsize=16)
def _dirichlet_split(domain: Domain, region: str):
    """(dof, pinned) boolean masks over region nodes, flattened layout."""
    _, mask = _region_ids(domain, region)
    radius = domain.region_radius(region)
    r = domain.r[mask]
    pinned = r >= radius - 0.5 * domain.h
    dof = ~pinned
    return dof, pinned


def _block_mass(values, w):
    """Node-block-diagonal sparse matrix from per-node (C, C) blocks."""
    n, c = values.shape[0], values.shape[1]
    rows = np.concatenate([a * n + np.arange(n) for a in range(c) for _ in range(c)])
    cols = np.concatenate([b * n + np.arange(n) for _ in range(c) for b in range(c)])
    vals = np.concatenate([w * values[:, a, b] for a in range(c) for b in range(c)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(c * n, c * n))


@lru_cache(maxsize=16)
def _system(metric: Metric, domain: Domain, region: str):
    """Stabilized Galerkin system for the weak form of delta d.

    The quadratic form averages the forward- and backward-difference
    energies, which equals the central-difference energy plus an O(h^2)
    penalty coupling the grid parity classes; plain central differences
    leave those classes independent and the solution picks up node-scale
    oscillations from rough sources.
    """
    _, mask = _region_ids(domain, region)
    n = int(mask.sum())
    _, gi, w, Q3 = _metric_tables(metric, domain, region)

    Dc = sym_d_matrix(metric, domain, region, "central")
    Dp = sym_d_matrix(metric, domain, region, "forward")
    Dm = sym_d_matrix(metric, domain, region, "backward")
    Mw3 = _block_mass(Q3, w)
    Mw2 = _block_mass(gi, w)
    A = (0.5 * (Dp.T @ Mw3 @ Dp + Dm.T @ Mw3 @ Dm)).tocsr()

    dof, pinned = _dirichlet_split(domain, region)
    dof_flat = np.concatenate([np.flatnonzero(dof), n + np.flatnonzero(dof)])
    pin_flat = np.concatenate([np.flatnonzero(pinned), n + np.flatnonzero(pinned)])
    A_dd = A[dof_flat][:, dof_flat].tocsc()
    lu = spla.splu(A_dd)
    return {
        "n": n, "D": Dc, "Dp": Dp, "Dm": Dm, "Mw3": Mw3, "Mw2": Mw2, "A": A,
        "dof_flat": dof_flat, "pin_flat": pin_flat,
        "A_dd": A_dd, "lu": lu,
    }


def _pinned_values(domain: Domain, region: str, alpha) -> np.ndarray:
    _, mask = _region_ids(domain, region)
    dof, pinned = _dirichlet_split(domain, region)
    pts = domain.points(mask)[pinned]
    if alpha is None:
        return np.zeros((pts.shape[0], 2))
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    if isinstance(alpha, BoundaryTrace):
        return alpha.interp(ang)
    return np.asarray(alpha(ang), dtype=float)


def solve_dirichlet(metric: Metric, domain: Domain, source=None, alpha=None,
                    region: str = "M") -> OneFormField:
    """Galerkin solution of delta d w = source, w = alpha on the circle.

    source: None, a OneFormField u (acting as -(u, phi)), or a
    DivergenceSource. alpha: None, a BoundaryTrace, or a callable of the
    boundary angle returning (m, 2) covector values.
    """
    if region not in ("M", "M1"):
        raise ValueError("Dirichlet solves run on the discs M or M1")
    sysd = _system(metric, domain, region)
    n = sysd["n"]

    if source is None and alpha is None:
        return OneFormField.zeros(domain, region)

    if source is None:
        b = np.zeros(2 * n)
    elif isinstance(source, DivergenceSource):
        b = sysd["D"].T @ (sysd["Mw3"] @ _flat(source.F, region))
    elif isinstance(source, OneFormField):
        b = -(sysd["Mw2"] @ _flat(source, region))
    else:
        raise TypeError("source must be None, OneFormField, or DivergenceSource")

    w_full = np.zeros(2 * n)
    pin_vals = _pinned_values(domain, region, alpha)
    half = sysd["pin_flat"].size // 2
    w_full[sysd["pin_flat"][:half]] = pin_vals[:, 0]
    w_full[sysd["pin_flat"][half:]] = pin_vals[:, 1]

    b_dof = b[sysd["dof_flat"]] - (sysd["A"] @ w_full)[sysd["dof_flat"]]
    x = sysd["lu"].solve(b_dof)

    resid = np.linalg.norm(sysd["A_dd"] @ x - b_dof)
    scale = np.linalg.norm(b_dof)
    if scale > 0 and resid > 1e-10 * scale:
        raise NonConvergence(f"relative residual {resid/scale:.2e} above 1e-10")

    w_full[sysd["dof_flat"]] = x
    return _unflat(OneFormField, w_full, domain, region)


def projection_orthogonality(metric: Metric, f: SymTensorField,
                             v: OneFormField, phi: OneFormField,
                             region: str = "M") -> float:
    """Galerkin residual <f - dv, d phi> in the solver's stacked pairing.

    Normalized by ||f - dv|| ||d phi|| (nodal norms); zero to solver
    accuracy for any phi vanishing on the Dirichlet layer.
    """
    from .fields import norm_l2, sym_d

    sysd = _system(metric, f.domain, region)
    ff = _flat(f, region)
    vf = _flat(v, region)
    pf = _flat(phi, region)
    num = 0.0
    for key in ("Dp", "Dm"):
        D = sysd[key]
        num += 0.5 * float((ff - D @ vf) @ (sysd["Mw3"] @ (D @ pf)))
    fs = f - sym_d(metric, v, region)
    den = norm_l2(metric, fs, region) * norm_l2(metric, sym_d(metric, phi, region), region)
    return abs(num) / max(den, 1e-300)


def solenoidal_project(metric: Metric, f: SymTensorField, region: str = "M"):
    """Orthogonal decomposition f = f^s + dv with v = 0 on the boundary.

    v minimizes ||f - dv||_L2 over discrete boundary-vanishing one-forms
    (the weak form of delta d v = delta f); f^s is formed with the same
    discrete derivative, so <f^s, d phi> vanishes to solver accuracy.
    """
    if not np.any(f.comps):
        return SymTensorField.zeros(f.domain, region), OneFormField.zeros(f.domain, region)
    v = solve_dirichlet(metric, f.domain, source=DivergenceSource(f),
                        alpha=None, region=region)
    D = sym_d_matrix(metric, f.domain, region)
    fs_flat = _flat(f, region) - D @ _flat(v, region)
    fs = _unflat(SymTensorField, fs_flat, f.domain, region)
    return fs, v


# ---------------------------------------------------------------------------
# scalar Riesz machinery for the discrete H^{-1} proxy norm
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _scalar_system(metric: Metric, domain: Domain, region: str):
    _, mask = _region_ids(domain, region)
    _, gi, w, _ = _metric_tables(metric, domain, region)
    D = [diff_matrix(domain, region, a) for a in range(2)]
    K = sum(D[k].T @ sp.diags(w * gi[:, k, l]) @ D[l]
            for k in range(2) for l in range(2))
    M = sp.diags(w)
    dof, _ = _dirichlet_split(domain, region)
    dof_ids = np.flatnonzero(dof)
    A = (M + K).tocsr()[dof_ids][:, dof_ids].tocsc()
    return {"lu": spla.splu(A), "M": M, "dof": dof_ids, "mask": mask, "w": w}


def neg_h1_norm(metric: Metric, field, region: str | None = None) -> float:
    """Discrete H^{-1} proxy: ||u||_{-1}^2 = <u, R u> with R the inverse
    Riesz map of the componentwise (mass + stiffness) H^1 form.

    Tensor components carry multiplicity (1, 2, 1) to match the L^2
    contraction convention.
    """
    region = region or field.region
    sysd = _scalar_system(metric, field.domain, region)
    mult = (1.0, 2.0, 1.0) if field.n_comps == 3 else (1.0, 1.0)
    total = 0.0
    for c in range(field.n_comps):
        u = field.comps[c][sysd["mask"]]
        rhs = (sysd["M"] @ u)[sysd["dof"]]
        phi = sysd["lu"].solve(rhs)
        total += mult[c] * float(phi @ rhs)
    return float(np.sqrt(max(total, 0.0)))
