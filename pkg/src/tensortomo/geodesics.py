"""Unit-speed geodesics, boundary fans, and the two-point problem.

All tracing is batched: a state array of rays advances together with a
classical RK4 step and per-ray step sizes, so fans and whole-grid normal
operator evaluations stay inside vectorized numpy. Flat metrics take an
exact straight-line shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoincidentPoints, EscapeFailure, NoConvergence, NonUnitDirection
from .geometry import Domain, Metric

_FINE_CIRCLE = 4096


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GeodesicPath:
    """A discretized unit-speed geodesic with exit data."""

    t: np.ndarray            # (n,) arclength samples
    x: np.ndarray            # (n, 2) positions
    v: np.ndarray            # (n, 2) unit tangents
    exit_time: float
    exit_point: np.ndarray
    exit_direction: np.ndarray


@dataclass(eq=False)
class BoundaryFan:
    """Quadrature nodes over the inward boundary sphere bundle.

    weight_mu = |<nu, omega>|_g * weight_sigma, the measure that makes the
    ray transform bounded on L^2.
    """

    points: np.ndarray       # (K, 2)
    dirs: np.ndarray         # (K, 2) inward unit vectors
    w_sigma: np.ndarray      # (K,)
    w_mu: np.ndarray         # (K,)
    circle: str
    radius: float
    n_points: int
    n_dirs: int

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TwoPointSolution:
    rho: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    hessian_mixed_det: float
    converged: bool


# ---------------------------------------------------------------------------
# core stepping
# ---------------------------------------------------------------------------

def _accel(metric: Metric, x, v):
    Gam = metric.christoffel(x)
    return -np.einsum("...kij,...i,...j->...k", Gam, v, v)


def _rk4_step(metric: Metric, x, v, dt, J=None, Jp=None):
    """One RK4 step of the geodesic (and optionally Jacobi) system.

    dt may be a scalar or a per-ray array. Velocities are renormalized to
    unit g-length afterwards by the callers that loop.
    """
    if metric.is_flat:
        xn = x + dt[..., None] * v if np.ndim(dt) else x + dt * v
        out = [xn, v]
        if J is not None:
            out += [J + dt * Jp, Jp]
        return out

    dtc = dt[..., None] if np.ndim(dt) else dt
    with_j = J is not None

    def f(xs, vs, Js, Jps):
        a = _accel(metric, xs, vs)
        if with_j:
            K = metric.gauss_curvature(xs)
            return vs, a, Jps, -K * Js
        return vs, a, None, None

    k1 = f(x, v, J, Jp)
    k2 = f(x + 0.5 * dtc * k1[0], v + 0.5 * dtc * k1[1],
           J + 0.5 * dt * k1[2] if with_j else None,
           Jp + 0.5 * dt * k1[3] if with_j else None)
    k3 = f(x + 0.5 * dtc * k2[0], v + 0.5 * dtc * k2[1],
           J + 0.5 * dt * k2[2] if with_j else None,
           Jp + 0.5 * dt * k2[3] if with_j else None)
    k4 = f(x + dtc * k3[0], v + dtc * k3[1],
           J + dt * k3[2] if with_j else None,
           Jp + dt * k3[3] if with_j else None)

    xn = x + dtc / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    vn = v + dtc / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    out = [xn, vn]
    if with_j:
        out += [J + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
                Jp + dt / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])]
    return out


def _renorm(metric, x, v):
    return v / metric.norm_vec(x, v)[..., None]


def _chord_exit(x, v, radius):
    """Exact exit arclength of straight rays from inside the circle."""
    b = np.einsum("...i,...i->...", x, v)
    c = np.einsum("...i,...i->...", x, x) - radius**2
    disc = np.maximum(b * b - c, 0.0)
    return -b + np.sqrt(disc)


def flow_to_exit(metric: Metric, domain: Domain, starts, dirs, radius,
                 step=1e-3, track_min_r=False):
    """Flow rays until they cross the circle of the given radius.

    Returns a dict with exit_time, exit_point, exit_dir and optionally the
    minimum |x| seen along each ray. The final partial step is resolved by
    bisection on arclength. Raises EscapeFailure if a ray exceeds ten
    metric diameters without exiting.
    """
    x = np.array(starts, dtype=float, copy=True).reshape(-1, 2)
    v = np.array(dirs, dtype=float, copy=True).reshape(-1, 2)
    n = x.shape[0]

    if metric.is_flat:
        tau = _chord_exit(x, v, radius)
        out = {
            "exit_time": tau,
            "exit_point": x + tau[:, None] * v,
            "exit_dir": v.copy(),
        }
        if track_min_r:
            t_near = np.clip(-np.einsum("ij,ij->i", x, v), 0.0, tau)
            out["min_r"] = np.linalg.norm(x + t_near[:, None] * v, axis=1)
        return out

    cap = 10.0 * 2.0 * radius * metric.max_speed(domain)
    max_steps = int(np.ceil(cap / step)) + 2

    t = np.zeros(n)
    exit_time = np.full(n, np.nan)
    exit_point = np.full((n, 2), np.nan)
    exit_dir = np.full((n, 2), np.nan)
    min_r = np.linalg.norm(x, axis=1)
    pre_x = np.empty_like(x)
    pre_v = np.empty_like(v)
    active = np.ones(n, dtype=bool)

    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, va = x[idx], v[idx]
        xn, vn = _rk4_step(metric, xa, va, step)
        vn = _renorm(metric, xn, vn)
        r_new = np.linalg.norm(xn, axis=1)
        crossed = r_new >= radius
        if track_min_r:
            min_r[idx] = np.minimum(min_r[idx], r_new)

        hit = idx[crossed]
        if hit.size:
            pre_x[hit], pre_v[hit] = x[hit], v[hit]
            # bisection on the final substep length
            lo = np.zeros(hit.size)
            hi = np.full(hit.size, step)
            bx, bv = xn[crossed], vn[crossed]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                bx, bv = _rk4_step(metric, pre_x[hit], pre_v[hit], mid)
                bv = _renorm(metric, bx, bv)
                inside = np.linalg.norm(bx, axis=1) < radius
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
                if np.all(hi - lo < 1e-14):
                    break
            s = 0.5 * (lo + hi)
            bx, bv = _rk4_step(metric, pre_x[hit], pre_v[hit], s)
            bv = _renorm(metric, bx, bv)
            exit_time[hit] = t[hit] + s
            exit_point[hit] = bx
            exit_dir[hit] = bv
            active[hit] = False

        keep = idx[~crossed]
        x[keep], v[keep] = xn[~crossed], vn[~crossed]
        t[keep] += step

    if np.any(active):
        raise EscapeFailure(
            f"{int(active.sum())} geodesics exceeded the arclength cap {cap:.2f}")

    out = {"exit_time": exit_time, "exit_point": exit_point, "exit_dir": exit_dir}
    if track_min_r:
        out["min_r"] = min_r
    return out


def _flow_fixed_time(metric: Metric, x0, v0, t_total, step, with_jacobi=False,
                     n_sub=None):
    """Flow each ray for its own arclength t_total (n_i equal substeps).

    Passing *n_sub* freezes the substep count so the endpoint map stays
    smooth in t_total (Newton shooting relies on this).
    """
    x = np.array(x0, dtype=float, copy=True).reshape(-1, 2)
    v = np.array(v0, dtype=float, copy=True).reshape(-1, 2)
    t_total = np.asarray(t_total, dtype=float).reshape(-1)

    if metric.is_flat:
        xe = x + t_total[:, None] * v
        if with_jacobi:
            return xe, v.copy(), t_total.copy(), np.ones_like(t_total)
        return xe, v.copy()

    if n_sub is None:
        n_i = np.maximum(np.ceil(t_total / step).astype(int), 1)
    else:
        n_i = np.asarray(n_sub, dtype=int).reshape(-1)
    dt = t_total / n_i
    J = np.zeros_like(t_total) if with_jacobi else None
    Jp = np.ones_like(t_total) if with_jacobi else None

    for j in range(int(n_i.max())):
        idx = np.flatnonzero(n_i > j)
        if with_jacobi:
            xn, vn, Jn, Jpn = _rk4_step(metric, x[idx], v[idx], dt[idx],
                                        J[idx], Jp[idx])
            J[idx], Jp[idx] = Jn, Jpn
        else:
            xn, vn = _rk4_step(metric, x[idx], v[idx], dt[idx])
        x[idx] = xn
        v[idx] = _renorm(metric, xn, vn)

    if with_jacobi:
        return x, v, J, Jp
    return x, v


def geodesic_integrals(metric: Metric, domain: Domain, starts, dirs, radius,
                       step, field_comps, track_min_r=False):
    """Integrate f_ij gdot^i gdot^j along geodesics to the exit circle.

    field_comps: list of (3, n, n) tensor component grids sharing the
    domain; all fields are integrated along the same rays in one sweep.
    Each ray gets an even number of equal substeps fitted to its own exit
    time, so the quadrature is pure composite Simpson. Returns
    (integrals (F, N), exit dict).
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 2)
    ex = flow_to_exit(metric, domain, starts, dirs, radius, step=step,
                      track_min_r=track_min_r)
    tau = ex["exit_time"]
    n_i = 2 * np.maximum(np.ceil(tau / (2.0 * step)).astype(int), 1)
    dt = tau / n_i

    stack = np.concatenate([np.asarray(c) for c in field_comps], axis=0)
    n_fields = len(field_comps)
    n_rays = starts.shape[0]
    acc = np.zeros((n_fields, n_rays))

    from ._grid import bilinear

    x = starts.copy()
    v = dirs.copy()
    max_n = int(n_i.max())
    for j in range(max_n + 1):
        alive = n_i >= j
        c = np.where((j == 0) | (j == n_i), 1.0,
                     np.where(j % 2 == 1, 4.0, 2.0))
        w = np.where(alive, c * dt / 3.0, 0.0)
        vals = bilinear(domain, stack, x).reshape(n_fields, 3, n_rays)
        integrand = (vals[:, 0] * v[:, 0] ** 2
                     + 2.0 * vals[:, 1] * v[:, 0] * v[:, 1]
                     + vals[:, 2] * v[:, 1] ** 2)
        acc += w * integrand
        if j == max_n:
            break
        idx = np.flatnonzero(n_i > j)
        xn, vn = _rk4_step(metric, x[idx], v[idx], dt[idx])
        x[idx] = xn
        v[idx] = _renorm(metric, xn, vn)
    return acc, ex


def jacobi_scan(metric: Metric, domain: Domain, starts, dirs,
                step=2e-3, t_min=2e-2):
    """Scan a ray family for conjugate points.

    Integrates J'' + K J = 0 with J(0) = 0, J'(0) = 1 to the outer exit
    and reports (min |J| for t > t_min, any sign change observed).
    """
    radius = domain.radius_M1
    x = np.array(starts, dtype=float, copy=True).reshape(-1, 2)
    v = np.array(dirs, dtype=float, copy=True).reshape(-1, 2)
    n = x.shape[0]

    if metric.is_flat:
        return t_min + step, False  # J = t exactly: first watched sample, no zeros

    cap = 10.0 * 2.0 * radius * metric.max_speed(domain)
    max_steps = int(np.ceil(cap / step)) + 2
    J = np.zeros(n)
    Jp = np.ones(n)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    min_abs = np.full(n, np.inf)
    flipped = False

    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xn, vn, Jn, Jpn = _rk4_step(metric, x[idx], v[idx], step, J[idx], Jp[idx])
        vn = _renorm(metric, xn, vn)
        t[idx] += step
        watched = t[idx] > t_min
        if np.any(watched):
            jj = Jn[watched]
            min_abs[idx[watched]] = np.minimum(min_abs[idx[watched]], np.abs(jj))
            if np.any(np.sign(jj) != np.sign(J[idx][watched])) or np.any(jj <= 0):
                flipped = True
        x[idx], v[idx], J[idx], Jp[idx] = xn, vn, Jn, Jpn
        done = np.linalg.norm(xn, axis=1) >= radius
        active[idx[done]] = False

    if np.any(active):
        raise EscapeFailure("jacobi scan: rays exceeded the arclength cap")
    m = min_abs[np.isfinite(min_abs)]
    return (float(m.min()) if m.size else np.inf), flipped


# ---------------------------------------------------------------------------
# public tracing
# ---------------------------------------------------------------------------

def trace(metric: Metric, domain: Domain, x, omega, terminate_at="M1",
          step=1e-3) -> GeodesicPath:
    """Trace the unit-speed geodesic from (x, omega) to the chosen circle.

    omega must be g-unit at x (NonUnitDirection otherwise); the final
    partial step solves the circle crossing by bisection on arclength.
    """
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega, dtype=float)
    radius = domain.region_radius(terminate_at)
    speed = float(metric.norm_vec(x[None], omega[None])[0])
    if abs(speed - 1.0) > 1e-6:
        raise NonUnitDirection(f"|omega|_g = {speed:.8f}")
    if np.linalg.norm(x) > radius + 1e-12:
        raise ValueError("start point lies outside the terminating circle")

    if metric.is_flat:
        tau = float(_chord_exit(x[None], omega[None], radius)[0])
        ts = np.arange(0.0, tau, step)
        ts = np.append(ts, tau)
        xs = x[None] + ts[:, None] * omega[None]
        vs = np.broadcast_to(omega, xs.shape).copy()
        return GeodesicPath(ts, xs, vs, tau, xs[-1].copy(), omega.copy())

    cap = 10.0 * 2.0 * radius * metric.max_speed(domain)
    ts, xs, vs = [0.0], [x.copy()], [omega.copy()]
    cx, cv, t = x.copy(), omega.copy(), 0.0
    while t < cap:
        nx, nv = _rk4_step(metric, cx[None], cv[None], step)
        nv = _renorm(metric, nx, nv)
        nx, nv = nx[0], nv[0]
        if np.linalg.norm(nx) >= radius:
            lo, hi = 0.0, step
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                bx, bv = _rk4_step(metric, cx[None], cv[None], np.array([mid]))
                bv = _renorm(metric, bx, bv)
                if np.linalg.norm(bx[0]) < radius:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-14:
                    break
            s = 0.5 * (lo + hi)
            bx, bv = _rk4_step(metric, cx[None], cv[None], np.array([s]))
            bv = _renorm(metric, bx, bv)
            ts.append(t + s)
            xs.append(bx[0])
            vs.append(bv[0])
            return GeodesicPath(np.array(ts), np.array(xs), np.array(vs),
                                t + s, bx[0], bv[0])
        cx, cv, t = nx, nv, t + step
        ts.append(t)
        xs.append(cx.copy())
        vs.append(cv.copy())
    raise EscapeFailure(f"geodesic exceeded the arclength cap {cap:.2f}")


def arclength_circle_points(metric: Metric, radius: float, n: int):
    """n points uniform in g-arclength on a circle, with frames.

    Returns (points, nu, tau, length): outward g-unit normals, g-unit
    tangents, and the total boundary g-length.
    """
    phi = np.linspace(0.0, 2 * np.pi, _FINE_CIRCLE + 1)
    ring = radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    tang = radius * np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    speed = metric.norm_vec(ring, tang)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1])
                                         * np.diff(phi))])
    L = s[-1]
    phi_k = np.interp(np.arange(n) * L / n, s, phi)

    pts = radius * np.stack([np.cos(phi_k), np.sin(phi_k)], axis=-1)
    u = pts / np.linalg.norm(pts, axis=-1, keepdims=True)      # covector dr
    nu = np.einsum("...ij,...j->...i", metric.ginv(pts), u)
    nu /= metric.norm_vec(pts, nu)[..., None]                   # outward g-unit
    tau = metric.unit(pts, np.stack([-pts[..., 1], pts[..., 0]], axis=-1))
    return pts, nu, tau, L


def boundary_fan(metric: Metric, domain: Domain, circle: str,
                 n_points: int, n_dirs: int) -> BoundaryFan:
    """Product quadrature over the inward sphere bundle of a circle.

    Boundary points are uniform in g-arclength; directions uniform in the
    g-angle over the inward half circle (midpoint rule, so the grazing
    weights stay positive).
    """
    if n_points < 4 or n_dirs < 4:
        raise ValueError("need n_points, n_dirs >= 4")
    R = domain.region_radius(circle)
    pts, nu, tau, L = arclength_circle_points(metric, R, n_points)

    theta = -0.5 * np.pi + (np.arange(n_dirs) + 0.5) * np.pi / n_dirs
    ct, st = np.cos(theta), np.sin(theta)
    # point-major layout: entry k*n_dirs + j
    dirs = (ct[None, :, None] * (-nu)[:, None, :]
            + st[None, :, None] * tau[:, None, :]).reshape(-1, 2)
    points = np.repeat(pts, n_dirs, axis=0)
    w_sigma = np.full(n_points * n_dirs, (L / n_points) * (np.pi / n_dirs))
    w_mu = np.tile(ct, n_points) * w_sigma

    inward = np.einsum("...ij,...i,...j->...", metric.g(points), dirs,
                       np.repeat(nu, n_dirs, axis=0))
    if not np.all(inward < 0):
        raise AssertionError("fan produced a non-inward direction")

    return BoundaryFan(points, dirs, w_sigma, w_mu, circle, R, n_points, n_dirs)


# ---------------------------------------------------------------------------
# two-point problem
# ---------------------------------------------------------------------------

def _sqrtm_spd(G):
    """Closed-form square root of SPD 2x2 matrices (batched)."""
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] ** 2
    s = np.sqrt(det)
    tr = G[..., 0, 0] + G[..., 1, 1]
    t = np.sqrt(tr + 2.0 * s)
    A = G.copy()
    A[..., 0, 0] += s
    A[..., 1, 1] += s
    return A / t[..., None, None]


def two_point_batch(metric: Metric, xs, ys, step=1e-3, tol=1e-10,
                    max_iter=50):
    """Newton shooting from xs to ys (vectorized over pairs).

    The direction is parametrized by its g-angle at x; the Jacobian of the
    endpoint map is exact, built from the velocity and the scalar Jacobi
    field along the current ray. Returns per-pair rho, unit-covector
    gradients of the distance, and |det d^2(rho^2/2)/dx dy| computed from
    the Jacobi field.
    """
    xs = np.array(xs, dtype=float).reshape(-1, 2)
    ys = np.array(ys, dtype=float).reshape(-1, 2)
    if xs.shape[0] == 1 and ys.shape[0] > 1:
        xs = np.repeat(xs, ys.shape[0], axis=0)
    n = xs.shape[0]

    d = ys - xs
    dist_e = np.linalg.norm(d, axis=1)
    coincident = dist_e < 1e-12

    A = _sqrtm_spd(metric.g(xs))
    u0 = np.einsum("nij,nj->ni", A, d)
    alpha = np.arctan2(u0[:, 1], u0[:, 0])
    Ainv = np.linalg.inv(A)
    t = metric.norm_vec(xs, d)  # first guess: metric length of the chord
    t = np.maximum(t, 1e-12)

    # a frozen substep count keeps the endpoint map smooth in t, and the
    # tolerance cannot beat the integrator's own O(step^4) accuracy
    n_sub = np.maximum(np.ceil(1.25 * t / step).astype(int), 2)
    tol_eff = max(tol, 50.0 * step**4)

    converged = np.zeros(n, dtype=bool)
    x_end = xs.copy()
    v_end = np.zeros_like(xs)
    J_end = np.zeros(n)

    work = ~coincident
    for _ in range(max_iter):
        idx = np.flatnonzero(work & ~converged)
        if idx.size == 0:
            break
        om = np.stack([np.cos(alpha[idx]), np.sin(alpha[idx])], axis=-1)
        om = np.einsum("nij,nj->ni", Ainv[idx], om)
        xe, ve, Je, _ = _flow_fixed_time(metric, xs[idx], om, t[idx], step,
                                         with_jacobi=True, n_sub=n_sub[idx])
        x_end[idx], v_end[idx], J_end[idx] = xe, ve, Je

        phi = xe - ys[idx]
        res = np.linalg.norm(phi, axis=1)
        ok = res <= tol_eff
        converged[idx[ok]] = True
        idx = idx[~ok]
        if idx.size == 0:
            continue
        xe, ve, Je, phi = xe[~ok], ve[~ok], Je[~ok], phi[~ok]

        # rot90 is the clockwise g-rotation while alpha turns the start
        # direction counterclockwise, so d(endpoint)/d(alpha) = -J * e
        e = -metric.rot90(xe, ve)
        a11, a12 = Je * e[:, 0], ve[:, 0]
        a21, a22 = Je * e[:, 1], ve[:, 1]
        det = a11 * a22 - a12 * a21
        det = np.where(np.abs(det) < 1e-14, np.sign(det) * 1e-14 + 1e-15, det)
        dal = (-phi[:, 0] * a22 + phi[:, 1] * a12) / det
        dt = (-a11 * phi[:, 1] + a21 * phi[:, 0]) / det
        dal = np.clip(dal, -0.5, 0.5)
        dt = np.clip(dt, -0.5 * np.maximum(t[idx], 0.1), 0.5 * np.maximum(t[idx], 0.1))
        alpha[idx] += dal
        t[idx] = np.maximum(t[idx] + dt, 0.25 * t[idx])

    rho = t.copy()
    rho[coincident] = 0.0
    om = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
    om = np.einsum("nij,nj->ni", Ainv, om)
    grad_x = -metric.lower(xs, om)
    grad_y = metric.lower(x_end, v_end)
    sdx = metric.sqrt_det(xs)
    sdy = metric.sqrt_det(x_end)
    with np.errstate(divide="ignore", invalid="ignore"):
        hess = np.where(np.abs(J_end) > 1e-300,
                        sdx * sdy * rho / np.abs(J_end), np.inf)

    return {
        "rho": rho,
        "grad_x": grad_x,
        "grad_y": grad_y,
        "hess_det": hess,
        "converged": converged,
        "coincident": coincident,
        "endpoint": x_end,
        "exit_dir": v_end,
    }


def two_point(metric: Metric, x, y, step=1e-3, tol=1e-10,
              max_iter=50) -> TwoPointSolution:
    """Distance function data for one pair of points (shooting method)."""
    sol = two_point_batch(metric, np.asarray(x, float)[None],
                          np.asarray(y, float)[None], step=step, tol=tol,
                          max_iter=max_iter)
    if sol["coincident"][0]:
        raise CoincidentPoints("two_point called with x = y")
    if not sol["converged"][0]:
        raise NoConvergence("two-point shooting did not converge")
    return TwoPointSolution(
        rho=float(sol["rho"][0]),
        grad_x=sol["grad_x"][0],
        grad_y=sol["grad_y"][0],
        hessian_mixed_det=float(sol["hess_det"][0]),
        converged=True,
    )
