"""Affine resampling kernels for 3D volumes.

All geometric preprocessing (resize, rotation, zoom) funnels through one
affine sampler: for each output voxel (i, j, k) the source coordinate is
``matrix @ (i, j, k) + offset``, sampled trilinearly (intensities) or by
nearest neighbour (label masks). Out-of-bounds samples read ``cval``.

The hot loop is compiled with numba when available; a vectorized
pure-numpy path is kept as a fallback and for benchmarking. Set
``KNEEUDA_NO_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f
        return wrap


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("KNEEUDA_NO_NUMBA", "") not in ("1", "true", "yes")


@njit(cache=True)
def _affine_linear_numba(vol, m, off, out, cval, edge):
    nx, ny, nz = vol.shape
    ox, oy, oz = out.shape
    for i in range(ox):
        for j in range(oy):
            for k in range(oz):
                x = m[0, 0] * i + m[0, 1] * j + m[0, 2] * k + off[0]
                y = m[1, 0] * i + m[1, 1] * j + m[1, 2] * k + off[1]
                z = m[2, 0] * i + m[2, 1] * j + m[2, 2] * k + off[2]
                if edge:
                    x = min(max(x, 0.0), nx - 1.0)
                    y = min(max(y, 0.0), ny - 1.0)
                    z = min(max(z, 0.0), nz - 1.0)
                x0 = int(np.floor(x)); y0 = int(np.floor(y)); z0 = int(np.floor(z))
                fx = x - x0; fy = y - y0; fz = z - z0
                acc = 0.0
                for dx in range(2):
                    wx = fx if dx else 1.0 - fx
                    xi = x0 + dx
                    for dy in range(2):
                        wy = fy if dy else 1.0 - fy
                        yi = y0 + dy
                        for dz in range(2):
                            wz = fz if dz else 1.0 - fz
                            zi = z0 + dz
                            w = wx * wy * wz
                            if w == 0.0:
                                continue
                            if 0 <= xi < nx and 0 <= yi < ny and 0 <= zi < nz:
                                acc += w * vol[xi, yi, zi]
                            else:
                                acc += w * cval
                out[i, j, k] = acc
    return out


@njit(cache=True)
def _affine_nearest_numba(vol, m, off, out, cval, edge):
    nx, ny, nz = vol.shape
    ox, oy, oz = out.shape
    for i in range(ox):
        for j in range(oy):
            for k in range(oz):
                x = m[0, 0] * i + m[0, 1] * j + m[0, 2] * k + off[0]
                y = m[1, 0] * i + m[1, 1] * j + m[1, 2] * k + off[1]
                z = m[2, 0] * i + m[2, 1] * j + m[2, 2] * k + off[2]
                if edge:
                    x = min(max(x, 0.0), nx - 1.0)
                    y = min(max(y, 0.0), ny - 1.0)
                    z = min(max(z, 0.0), nz - 1.0)
                xi = int(np.floor(x + 0.5))
                yi = int(np.floor(y + 0.5))
                zi = int(np.floor(z + 0.5))
                if 0 <= xi < nx and 0 <= yi < ny and 0 <= zi < nz:
                    out[i, j, k] = vol[xi, yi, zi]
                else:
                    out[i, j, k] = cval
    return out


def _source_coords(m, off, out_shape):
    grid = np.indices(out_shape, dtype=np.float64)  # (3, ox, oy, oz)
    pts = grid.reshape(3, -1)
    return m @ pts + off[:, None]


def _affine_linear_numpy(vol, m, off, out_shape, cval, edge):
    nx, ny, nz = vol.shape
    coords = _source_coords(m, off, out_shape)
    if edge:
        for axis, n in enumerate((nx, ny, nz)):
            np.clip(coords[axis], 0.0, n - 1.0, out=coords[axis])
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    acc = np.zeros(coords.shape[1], dtype=np.float64)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                xi = lo[0] + dx
                yi = lo[1] + dy
                zi = lo[2] + dz
                w = ((frac[0] if dx else 1.0 - frac[0])
                     * (frac[1] if dy else 1.0 - frac[1])
                     * (frac[2] if dz else 1.0 - frac[2]))
                inside = ((xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny)
                          & (zi >= 0) & (zi < nz))
                vals = np.where(
                    inside,
                    vol[np.clip(xi, 0, nx - 1), np.clip(yi, 0, ny - 1),
                        np.clip(zi, 0, nz - 1)].astype(np.float64),
                    cval)
                acc += np.where(w == 0.0, 0.0, w * vals)
    return acc.reshape(out_shape)


def _affine_nearest_numpy(vol, m, off, out_shape, cval, edge):
    nx, ny, nz = vol.shape
    coords = _source_coords(m, off, out_shape)
    if edge:
        for axis, n in enumerate((nx, ny, nz)):
            np.clip(coords[axis], 0.0, n - 1.0, out=coords[axis])
    idx = np.floor(coords + 0.5).astype(np.int64)
    inside = ((idx[0] >= 0) & (idx[0] < nx) & (idx[1] >= 0) & (idx[1] < ny)
              & (idx[2] >= 0) & (idx[2] < nz))
    vals = vol[np.clip(idx[0], 0, nx - 1), np.clip(idx[1], 0, ny - 1),
               np.clip(idx[2], 0, nz - 1)]
    vals = np.where(inside, vals, np.asarray(cval, dtype=vol.dtype))
    return vals.reshape(out_shape)


def affine_sample(vol: np.ndarray, matrix: np.ndarray, offset: np.ndarray,
                  out_shape: tuple[int, int, int], order: int = 1,
                  cval: float = 0.0, edge: bool = False,
                  backend: str | None = None) -> np.ndarray:
    """Resample ``vol`` onto ``out_shape``. order 1 = trilinear (float32
    result), order 0 = nearest (dtype preserved). edge=True clamps
    coordinates to the volume (resize semantics) instead of reading cval
    outside (rotation/zoom semantics). backend in {None, "numba",
    "numpy"}; None picks numba unless disabled by env."""
    if any(s <= 0 for s in out_shape):
        raise ValueError(f"out_shape must be positive, got {out_shape}")
    if order not in (0, 1):
        raise ValueError(f"order must be 0 or 1, got {order}")
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    off = np.ascontiguousarray(offset, dtype=np.float64)
    if backend is None:
        backend = "numba" if numba_enabled() else "numpy"
    if order == 1:
        vol64 = np.ascontiguousarray(vol, dtype=np.float64)
        if backend == "numba":
            out = np.empty(out_shape, dtype=np.float64)
            _affine_linear_numba(vol64, m, off, out, float(cval), edge)
        else:
            out = _affine_linear_numpy(vol64, m, off, out_shape, float(cval), edge)
        return out.astype(np.float32)
    vol_c = np.ascontiguousarray(vol)
    if backend == "numba":
        out = np.empty(out_shape, dtype=vol_c.dtype)
        _affine_nearest_numba(vol_c, m, off, out, vol_c.dtype.type(cval), edge)
        return out
    return _affine_nearest_numpy(vol_c, m, off, out_shape, cval, edge)


# --- transform builders -----------------------------------------------------

def resize_transform(in_shape, out_shape):
    """Pixel-center-aligned scaling: x_in = (i_out + 0.5) * n_in/n_out - 0.5.
    Identity when shapes match."""
    scale = np.array([i / o for i, o in zip(in_shape, out_shape)])
    m = np.diag(scale)
    off = 0.5 * scale - 0.5
    return m, off


def rotation_transform(shape, angle_deg: float):
    """In-plane rotation (about the third axis) around the volume center;
    the sampler needs the inverse map, so the matrix is R(-angle)."""
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    m = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    off = center - m @ center
    return m, off


def zoom_transform(shape, factor: float):
    """Zoom about the volume center by ``factor`` (>1 magnifies), output
    kept at the input shape, i.e. an implicit center crop."""
    m = np.diag(np.full(3, 1.0 / factor))
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    off = center - m @ center
    return m, off
