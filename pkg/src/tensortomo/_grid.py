"""Bilinear sampling of grid arrays at arbitrary points."""

from __future__ import annotations

import numpy as np

from .geometry import Domain


def pad_region(comps: np.ndarray, mask: np.ndarray, rings: int = 2) -> np.ndarray:
    """Extend grid values a few nodes past a region by neighbor averaging.

    Sampling points between the outermost region nodes and the bounding
    circle then see boundary values instead of an artificial drop to zero.
    Fields supported strictly inside the region are unchanged (zeros copy).
    """
    out = np.array(comps, dtype=float, copy=True)
    m = mask.copy()
    for _ in range(rings):
        nb = np.zeros_like(out)
        cnt = np.zeros(m.shape)
        for axis in (0, 1):
            for sign in (1, -1):
                shifted_m = np.roll(m, sign, axis=axis)
                shifted_v = np.roll(out, sign, axis=axis + 1)
                sl = [slice(None)] * 2
                sl[axis] = 0 if sign == 1 else -1
                shifted_m[tuple(sl)] = False  # kill wrap-around
                nb += np.where(shifted_m, shifted_v, 0.0)
                cnt += shifted_m
        newly = (~m) & (cnt > 0)
        out[:, newly] = nb[:, newly] / cnt[newly]
        m = m | newly
    return out


def bilinear(domain: Domain, comps: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample (C, n, n) grid arrays at points (..., 2), returning (C, ...).

    Fields are stored as zero outside their validity region, so sampling
    implements extension by zero; indices clip at the ghost ring.
    """
    comps = np.asarray(comps)
    single = comps.ndim == 2
    if single:
        comps = comps[None]
    n_side = domain.n_side

    q1 = (pts[..., 0] - domain.xs[0]) / domain.h
    q2 = (pts[..., 1] - domain.xs[0]) / domain.h
    i0 = np.clip(np.floor(q1).astype(np.int64), 0, n_side - 2)
    j0 = np.clip(np.floor(q2).astype(np.int64), 0, n_side - 2)
    fx = np.clip(q1 - i0, 0.0, 1.0)
    fy = np.clip(q2 - j0, 0.0, 1.0)

    base = i0 * n_side + j0
    flat = comps.reshape(comps.shape[0], -1)
    c00 = flat[:, base]
    c10 = flat[:, base + n_side]
    c01 = flat[:, base + 1]
    c11 = flat[:, base + n_side + 1]

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    out = c00 * w00 + c10 * w10 + c01 * w01 + c11 * w11
    return out[0] if single else out
