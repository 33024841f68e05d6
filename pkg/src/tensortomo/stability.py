"""Constructive boundary recovery and the stability experiments.

The pipeline follows the structure of the sharp-estimate argument:
project the zero-extended tensor on the outer disc, read off the covector
trace on the inner circle by integrating the solenoidal part along
geodesics that avoid the inner disc, solve the Dirichlet problem with
that trace, and reassemble the inner solenoidal projection. Two
independent routes to the trace (geodesic integration vs the global
elliptic solve) and two routes to f^s (pipeline vs direct projection)
give the oracle-equivalence tests.

The probes measure the two-sided bound on seeded ensembles, its
degradation under metric perturbations of fixed discrete C^3 size, and
closed-loop CGLS recovery from ray data.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .elliptic import neg_h1_norm, solenoidal_project, solve_dirichlet
from .errors import (CertificationFailure, EnsembleDegenerate, GeodesicEntersM,
                     IllConditionedPair, Stagnation)
from .fields import (BoundaryTrace, OneFormField, SymTensorField,
                     norm_h1, norm_l2, sym_d)
from .geodesics import arclength_circle_points, flow_to_exit, geodesic_integrals
from .geometry import (Domain, EuclideanMetric, Metric, PerturbedMetric,
                       certify_simple, default_perturbation_shape,
                       metric_c3_distance)
from .normal import normal_on_grid
from .phantoms import tensor_ensemble
from .transform import RayData


# ---------------------------------------------------------------------------
# boundary recovery (the constructive chain)
# ---------------------------------------------------------------------------

def annulus_solenoidal_part(metric: Metric, v_M1: OneFormField) -> SymTensorField:
    """f^s_{M1} on the annulus, differentiated from the annulus side only.

    The potential of the zero-extended field has a kink on the inner
    circle (the divergence of the extension is a surface distribution
    there), so the solenoidal part is represented as -dv with one-sided
    stencils that never cross the circle.
    """
    return -1.0 * sym_d(metric, v_M1.restrict("annulus"), "annulus")


def inner_solenoidal_part(metric: Metric, f: SymTensorField,
                          v_M1: OneFormField) -> SymTensorField:
    """f^s_{M1} restricted to the inner disc, kink-aware (see above)."""
    return f.restrict("M") - sym_d(metric, v_M1.restrict("M"), "M")


def recover_boundary_trace(metric: Metric, f: SymTensorField,
                           n_boundary: int = 64, tilt: float = np.pi / 4,
                           step: float = 1e-3,
                           v_M1: OneFormField | None = None,
                           max_retries: int = 3) -> BoundaryTrace:
    """Recover w on the inner circle from geodesic integrals of f^s_{M1}.

    At each boundary point two outward directions (normal tilted by +-tilt
    toward the tangent) generate geodesics to the outer boundary; since w
    vanishes there, integrating the solenoidal part along each ray yields
    w_i(x) xi^i, and the 2x2 system recovers w_i(x). Rays that dip into
    the inner disc are retried with a steeper tilt toward the normal.
    """
    domain = f.domain
    if v_M1 is None:
        _, v_M1 = solenoidal_project(metric, f.restrict("M1"), "M1")
    fs_ann = annulus_solenoidal_part(metric, v_M1)

    pts, nu, tau, _ = arclength_circle_points(metric, domain.radius_M, n_boundary)
    angles = np.arctan2(pts[:, 1], pts[:, 0])

    comps = [fs_ann.quad_comps]
    b = np.zeros((n_boundary, 2))
    xi_used = np.zeros((n_boundary, 2, 2))

    for a, sgn in enumerate((+1.0, -1.0)):
        theta = sgn * tilt
        todo = np.arange(n_boundary)
        for _ in range(max_retries + 1):
            xi = np.cos(theta) * nu[todo] + np.sin(theta) * tau[todo]
            ints, ex = geodesic_integrals(metric, domain, pts[todo], xi,
                                          domain.radius_M1, step, comps,
                                          track_min_r=True)
            ok = ex["min_r"] >= domain.radius_M - 1e-7
            b[todo[ok], a] = ints[0][ok]
            xi_used[todo[ok], a] = xi[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
            theta *= 2.0 / 3.0  # tilt toward the normal and retry
        if todo.size:
            raise GeodesicEntersM(
                f"{todo.size} boundary rays entered the inner disc after retries")

    det = (xi_used[:, 0, 0] * xi_used[:, 1, 1]
           - xi_used[:, 0, 1] * xi_used[:, 1, 0])
    if np.any(np.abs(det) < 0.1):
        raise IllConditionedPair("direction pair nearly collinear")
    w = np.empty((n_boundary, 2))
    w[:, 0] = (b[:, 0] * xi_used[:, 1, 1] - b[:, 1] * xi_used[:, 0, 1]) / det
    w[:, 1] = (xi_used[:, 0, 0] * b[:, 1] - xi_used[:, 1, 0] * b[:, 0]) / det
    return BoundaryTrace(domain.radius_M, np.mod(angles, 2 * np.pi), w)


def overdetermination_residual(metric: Metric, f: SymTensorField,
                               trace: BoundaryTrace, theta: float = 0.0,
                               step: float = 1e-3,
                               v_M1: OneFormField | None = None) -> float:
    """Relative mismatch of the trace against a third, unused direction."""
    domain = f.domain
    if v_M1 is None:
        _, v_M1 = solenoidal_project(metric, f.restrict("M1"), "M1")
    fs_ann = annulus_solenoidal_part(metric, v_M1)
    n = trace.angles.size
    pts, nu, tau, _ = arclength_circle_points(metric, domain.radius_M, n)
    xi = np.cos(theta) * nu + np.sin(theta) * tau
    ints, _ = geodesic_integrals(metric, domain, pts, xi, domain.radius_M1,
                                 step, [fs_ann.quad_comps])
    predicted = np.einsum("ni,ni->n", trace.values, xi)
    scale = np.sqrt(np.mean(ints[0] ** 2)) + 1e-300
    return float(np.sqrt(np.mean((predicted - ints[0]) ** 2)) / scale)


def elliptic_trace(metric: Metric, f: SymTensorField, n_boundary: int = 64,
                   v_M1: OneFormField | None = None) -> BoundaryTrace:
    """Oracle route to the same trace: the global solve on the outer disc.

    The potential of the zero-extended field solves the same boundary
    value problem as the recovery target up to a field vanishing on the
    inner circle, so its trace there coincides.
    """
    domain = f.domain
    if v_M1 is None:
        _, v_M1 = solenoidal_project(metric, f.restrict("M1"), "M1")
    return v_M1.trace_on_circle(domain.radius_M, n_boundary)


def reconstruct_fs_from_trace(metric: Metric, f: SymTensorField,
                              w_trace: BoundaryTrace,
                              v_M1: OneFormField | None = None) -> SymTensorField:
    """Inner solenoidal part from the recovered trace.

    Solves delta d w = 0 on the inner disc with the trace as Dirichlet
    data and returns f^s = f^s_{M1}|_M + dw.
    """
    domain = f.domain
    if v_M1 is None:
        _, v_M1 = solenoidal_project(metric, f.restrict("M1"), "M1")
    w = solve_dirichlet(metric, domain, source=None, alpha=w_trace, region="M")
    return inner_solenoidal_part(metric, f, v_M1) + sym_d(metric, w, "M")


def pipeline_fs(metric: Metric, f: SymTensorField, n_boundary: int = 64,
                step: float = 1e-3):
    """Full constructive chain; returns (f^s pipeline, trace, v_{M1})."""
    _, v_M1 = solenoidal_project(metric, f.restrict("M1"), "M1")
    trace = recover_boundary_trace(metric, f, n_boundary=n_boundary,
                                   step=step, v_M1=v_M1)
    fs = reconstruct_fs_from_trace(metric, f, trace, v_M1=v_M1)
    return fs, trace, v_M1


# ---------------------------------------------------------------------------
# stability probe
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    metric_name: str
    h: float
    n_dirs: int
    seed: int
    ratios: np.ndarray            # ||Nf||_H1(M1) / ||f^s||_L2(M) per sample
    prop1_ratios: np.ndarray      # (||Nf||_H1 + ||f||_{H^-1}) / ||f^s||
    fs_fractions: np.ndarray      # ||f^s|| / ||f||
    kept: np.ndarray              # indices of samples passing the filter
    n_requested: int = 0

    @property
    def c_emp(self) -> float:
        return float(self.ratios.min())

    @property
    def C_emp(self) -> float:
        return float(self.ratios.max())


def stability_probe(metric: Metric, domain: Domain, n_samples: int = 50,
                    seed: int = 7, evaluator: str = "auto", n_dirs: int = 64,
                    step: float | None = None, band: float = 8.0,
                    n_modes: int = 10, min_fs_fraction: float = 1e-3,
                    threads: int = 1) -> StabilityReport:
    """Empirical two-sided stability constants on a seeded ensemble.

    Ratio per sample: ||Nf||_{H^1(M1)} / ||f^s||_{L^2(M)}; nearly
    potential samples (||f^s|| < min_fs_fraction ||f||) are filtered out.
    The non-sharp variant adds the discrete H^{-1} proxy of f on top.
    """
    fields = tensor_ensemble(domain, n_samples, seed, band=band, n_modes=n_modes)

    norms_f = np.array([norm_l2(metric, f, "M") for f in fields])
    projections = [solenoidal_project(metric, f, "M") for f in fields]
    norms_fs = np.array([norm_l2(metric, fs, "M") for fs, _ in projections])
    frac = norms_fs / norms_f
    kept = np.flatnonzero(frac >= min_fs_fraction)
    if kept.size == 0:
        raise EnsembleDegenerate("all samples are numerically potential")

    nf = normal_on_grid(metric, [fields[i] for i in kept], domain,
                        n_dirs=n_dirs, step=step, evaluator=evaluator,
                        threads=threads)
    num = np.array([norm_h1(metric, g, "M1") for g in nf])
    neg = np.array([neg_h1_norm(metric, fields[i], "M") for i in kept])
    ratios = num / norms_fs[kept]
    prop1 = (num + neg) / norms_fs[kept]

    return StabilityReport(
        metric_name=metric.name, h=domain.h, n_dirs=n_dirs, seed=seed,
        ratios=ratios, prop1_ratios=prop1, fs_fractions=frac[kept],
        kept=kept, n_requested=n_samples,
    )


# ---------------------------------------------------------------------------
# perturbation probe
# ---------------------------------------------------------------------------

@dataclass
class PerturbationReport:
    eps: np.ndarray
    d: np.ndarray                 # operator-difference norms
    p: np.ndarray                 # projector-difference norms
    slope_d: float
    slope_p: float
    c3_sizes: np.ndarray
    c_emp: np.ndarray             # per metric, eps = 0 first
    C_emp: np.ndarray


def perturbation_probe(domain: Domain, eps_list, n_test: int = 10,
                       seed: int = 11, n_dirs: int = 64,
                       step: float | None = None, n_stability: int = 12,
                       certify: bool = True, threads: int = 1,
                       shape=None) -> PerturbationReport:
    """Linear-in-epsilon response of N and of the solenoidal projector.

    The base metric is Euclidean; the perturbation shape has unit discrete
    C^3 norm so the C^3 size of each perturbed metric equals eps. All
    operators are evaluated with the same angular-composition quadrature
    so differences cancel the shared bias; comparison norms use the base
    metric, while each metric's own stability ratios use its own norms.
    """
    eps_list = np.asarray(sorted(eps_list), dtype=float)
    if np.any(eps_list <= 0):
        raise ValueError("eps values must be positive")
    shape = shape if shape is not None else default_perturbation_shape()
    g0 = EuclideanMetric()
    metrics = [g0] + [PerturbedMetric(float(e), shape) for e in eps_list]

    c3 = np.array([metric_c3_distance(m, g0, domain) for m in metrics[1:]])
    if certify:
        for m in metrics[1:]:
            rep = certify_simple(m, domain, n_boundary=24, n_dirs=8,
                                 step=5e-3, two_point_samples=0)
            if not rep.is_simple:
                raise CertificationFailure(
                    f"perturbed metric (eps={m.eps}) failed certification")

    test = tensor_ensemble(domain, n_test, seed, band=8.0, n_modes=10)
    stab = tensor_ensemble(domain, n_stability, seed + 1, band=8.0, n_modes=10)
    all_fields = test + stab

    if step is None:
        step = domain.h
    per_metric = [normal_on_grid(m, all_fields, domain, n_dirs=n_dirs,
                                 step=step, evaluator="compose",
                                 threads=threads)
                  for m in metrics]

    norms_f = np.array([norm_l2(g0, f, "M") for f in test])
    d = np.empty(eps_list.size)
    p = np.empty(eps_list.size)
    for k in range(eps_list.size):
        diffs = [norm_h1(g0, per_metric[k + 1][i] - per_metric[0][i], "M1")
                 for i in range(n_test)]
        d[k] = np.max(np.asarray(diffs) / norms_f)
        pr = []
        for i in range(n_test):
            fs_g, _ = solenoidal_project(metrics[k + 1], test[i], "M")
            fs_0, _ = solenoidal_project(g0, test[i], "M")
            pr.append(norm_l2(g0, fs_g - fs_0, "M") / norms_f[i])
        p[k] = np.max(pr)

    c_emp, C_emp = [], []
    for mi, m in enumerate(metrics):
        rr = []
        for i, f in enumerate(stab):
            fs, _ = solenoidal_project(m, f, "M")
            nfs = norm_l2(m, fs, "M")
            if nfs < 1e-3 * norm_l2(m, f, "M"):
                continue
            rr.append(norm_h1(m, per_metric[mi][n_test + i], "M1") / nfs)
        c_emp.append(min(rr))
        C_emp.append(max(rr))

    slope_d = float(np.polyfit(np.log(eps_list), np.log(d), 1)[0])
    slope_p = float(np.polyfit(np.log(eps_list), np.log(p), 1)[0])
    return PerturbationReport(eps=eps_list, d=d, p=p, slope_d=slope_d,
                              slope_p=slope_p, c3_sizes=c3,
                              c_emp=np.array(c_emp), C_emp=np.array(C_emp))


# ---------------------------------------------------------------------------
# CGLS reconstruction from ray data
# ---------------------------------------------------------------------------

@dataclass
class CGLSInfo:
    iterations: int
    residual_rel: float
    grad_rel: float
    converged: bool
    history: np.ndarray


@lru_cache(maxsize=8)
def _forward_matrix(metric: Metric, domain: Domain, fan, step: float) -> sp.csr_matrix:
    """Sparse discrete ray transform: region-M components -> fan values.

    Rows replicate the Simpson walk of geodesic_integrals: per sample,
    bilinear corner weights times the velocity quadratic factors. Columns
    outside the inner disc are dropped (extension by zero).
    """
    from .fields import _region_ids

    ids, mask = _region_ids(domain, "M")
    n_m = int(mask.sum())
    n_side = domain.n_side
    node_col = np.full(n_side * n_side, -1, dtype=np.int64)
    node_col[mask.ravel()] = np.arange(n_m)

    ex = flow_to_exit(metric, domain, fan.points, fan.dirs, fan.radius, step=step)
    tau = ex["exit_time"]
    n_i = 2 * np.maximum(np.ceil(tau / (2.0 * step)).astype(int), 1)
    dt = tau / n_i

    rows, cols, vals = [], [], []
    x = fan.points.copy()
    v = fan.dirs.copy()
    k_ray = np.arange(len(fan))
    max_n = int(n_i.max())
    from .geodesics import _renorm, _rk4_step

    for j in range(max_n + 1):
        alive = n_i >= j
        c = np.where((j == 0) | (j == n_i), 1.0,
                     np.where(j % 2 == 1, 4.0, 2.0))
        w = np.where(alive, c * dt / 3.0, 0.0)

        q1 = (x[:, 0] - domain.xs[0]) / domain.h
        q2 = (x[:, 1] - domain.xs[0]) / domain.h
        i0 = np.clip(np.floor(q1).astype(np.int64), 0, n_side - 2)
        j0 = np.clip(np.floor(q2).astype(np.int64), 0, n_side - 2)
        fx = np.clip(q1 - i0, 0.0, 1.0)
        fy = np.clip(q2 - j0, 0.0, 1.0)
        corner_nodes = [i0 * n_side + j0, (i0 + 1) * n_side + j0,
                        i0 * n_side + j0 + 1, (i0 + 1) * n_side + j0 + 1]
        corner_w = [(1 - fx) * (1 - fy), fx * (1 - fy),
                    (1 - fx) * fy, fx * fy]
        vv = [v[:, 0] ** 2, 2.0 * v[:, 0] * v[:, 1], v[:, 1] ** 2]

        for nodes, cw in zip(corner_nodes, corner_w):
            col = node_col[nodes]
            good = (col >= 0) & alive & (w > 0) & (cw > 0)
            for comp in range(3):
                val = w * cw * vv[comp]
                rows.append(k_ray[good])
                cols.append(comp * n_m + col[good])
                vals.append(val[good])

        if j == max_n:
            break
        idx = np.flatnonzero(n_i > j)
        xn, vn = _rk4_step(metric, x[idx], v[idx], dt[idx])
        x[idx] = xn
        v[idx] = _renorm(metric, xn, vn)

    T = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(fan), 3 * n_m))
    T.sum_duplicates()
    return T


def reconstruct_cgls(metric: Metric, domain: Domain, data: RayData,
                     max_iter: int = 200, tol: float = 1e-4,
                     step: float | None = None):
    """CGLS inversion of the discrete ray transform (mu-weighted).

    Iterates live on the inner disc; potential fields sit in the numerical
    null space, so the limit is a discrete proxy of f^s. Stops on relative
    residual, on the normal-equations gradient, or raises Stagnation when
    the residual plateaus above tolerance.
    """
    if not np.any(data.values):
        return (SymTensorField.zeros(domain, "M"),
                CGLSInfo(0, 0.0, 0.0, True, np.zeros(0)))

    if step is None:
        step = 2.0 * domain.h
    T = _forward_matrix(metric, domain, data.fan, step)
    sqw = np.sqrt(data.fan.w_mu)
    Tw = sp.diags(sqw) @ T
    b = sqw * data.values

    x = np.zeros(T.shape[1])
    r = b.copy()
    s = Tw.T @ r
    p = s.copy()
    gamma = float(s @ s)
    nb = float(np.linalg.norm(b))
    g0 = float(np.sqrt(gamma))
    best = np.inf
    since_best = 0
    hist = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = Tw @ p
        alpha = gamma / float(q @ q)
        x += alpha * p
        r -= alpha * q
        rn = float(np.linalg.norm(r))
        hist.append(rn / nb)
        if rn < best * (1.0 - 1e-9):
            best, since_best = rn, 0
        else:
            since_best += 1
        s = Tw.T @ r
        gn = float(s @ s)
        if rn <= tol * nb or np.sqrt(gn) <= tol * g0:
            converged = True
            break
        if since_best >= 30:
            raise Stagnation(
                f"residual plateau at {rn/nb:.3e} after {it} iterations")
        p = s + (gn / gamma) * p
        gamma = gn

    from .fields import _unflat
    field = _unflat(SymTensorField, x, domain, "M")
    return field, CGLSInfo(it, hist[-1] if hist else 0.0,
                           float(np.sqrt(gamma) / g0), converged,
                           np.asarray(hist))


# ---------------------------------------------------------------------------
# CSV writers (file names carry the run parameters)
# ---------------------------------------------------------------------------

def write_stability_csv(report: StabilityReport, outdir) -> str:
    import os

    name = (f"stability_{report.metric_name}_h{round(1/report.h)}"
            f"_dirs{report.n_dirs}_seed{report.seed}.csv")
    path = os.path.join(outdir, name)
    with open(path, "w") as fh:
        fh.write("sample,ratio,prop1_ratio,fs_fraction\n")
        for k in range(report.ratios.size):
            fh.write(f"{report.kept[k]},{report.ratios[k]:.17g},"
                     f"{report.prop1_ratios[k]:.17g},"
                     f"{report.fs_fractions[k]:.17g}\n")
        fh.write(f"# c_emp,{report.c_emp:.17g}\n")
        fh.write(f"# C_emp,{report.C_emp:.17g}\n")
        fh.write(f"# kept,{report.ratios.size},of,{report.n_requested}\n")
    return path


def write_perturbation_csv(report: PerturbationReport, outdir,
                           label: str = "perturbation") -> str:
    import os

    path = os.path.join(outdir, f"{label}.csv")
    with open(path, "w") as fh:
        fh.write("eps,c3_size,d,p,c_emp,C_emp\n")
        fh.write(f"0,0,0,0,{report.c_emp[0]:.17g},{report.C_emp[0]:.17g}\n")
        for k in range(report.eps.size):
            fh.write(f"{report.eps[k]:.17g},{report.c3_sizes[k]:.17g},"
                     f"{report.d[k]:.17g},{report.p[k]:.17g},"
                     f"{report.c_emp[k+1]:.17g},{report.C_emp[k+1]:.17g}\n")
        fh.write(f"# slope_d,{report.slope_d:.17g}\n")
        fh.write(f"# slope_p,{report.slope_p:.17g}\n")
    return path
