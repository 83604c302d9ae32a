"""Voxel grids: z-axis rotation, differentiable min-projection, hull carving.

Grid convention: a d*d*d array of values in [0, 1] where 0 means occupied
and 1 means empty, indexed (i, j, k) with i the depth axis toward the
camera at zero azimuth and k the vertical rotation axis.  Projections are
d*d images indexed (j, k) with the same 0 = object convention.  ``d`` is
expected odd so rotation about the grid center maps the center cell to
itself.

Rotation resamples with nearest-neighbor lookups about the grid center
c = (d - 1) / 2; source cells falling outside the grid read as empty (1).
Angles are degrees everywhere.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor

__all__ = [
    "rotation_index_map",
    "rotate_z",
    "project_min",
    "project_at",
    "carve_hull",
    "save_vox",
    "load_vox",
]

FILL_EMPTY = 1.0


def rotation_index_map(d: int, theta_deg: float):
    """Nearest-neighbor source indices for rotating a d*d slice by theta.

    Returns (si, sj, valid): output cell (i, j) reads source (si[i,j], sj[i,j])
    when valid[i,j], else the empty fill value.  At theta = 0 the map is the
    identity bit-for-bit.
    """
    c = (d - 1) / 2.0
    th = math.radians(float(theta_deg))
    cos_t, sin_t = math.cos(th), math.sin(th)
    ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    ip = ii - c
    jp = jj - c
    si = np.floor(cos_t * ip - sin_t * jp + 0.5 + c).astype(np.int64)
    sj = np.floor(sin_t * ip + cos_t * jp + 0.5 + c).astype(np.int64)
    valid = (si >= 0) & (si < d) & (sj >= 0) & (sj < d)
    return si, sj, valid


def _check_grid_shape(shape, what="rotate_z"):
    if len(shape) == 3:
        d = shape[0]
        batched = False
    elif len(shape) == 4:
        d = shape[1]
        batched = True
    else:
        raise ValueError(f"{what}: expected a (d,d,d) or (B,d,d,d) grid, got {shape}")
    if shape[-3:] != (d, d, d):
        raise ValueError(f"{what}: grid must be cubic, got {shape}")
    return d, batched


def _rotate_one(values: np.ndarray, theta: float) -> np.ndarray:
    d = values.shape[0]
    si, sj, valid = rotation_index_map(d, theta)
    gathered = values[si.clip(0, d - 1), sj.clip(0, d - 1), :]
    return np.where(valid[:, :, None], gathered, FILL_EMPTY)


def rotate_z(v, theta):
    """Rotate a voxel grid about the vertical axis by ``theta`` degrees.

    Accepts a plain array or a Tensor; Tensors get a graph node whose
    backward scatters each output cell's gradient onto the source cell it
    sampled (out-of-bounds cells receive none).  Batched (B,d,d,d) grids
    take a per-item ``theta`` vector.
    """
    if not isinstance(v, Tensor):
        arr = np.asarray(v, dtype=float)
        d, batched = _check_grid_shape(arr.shape)
        if not batched:
            return _rotate_one(arr, float(theta))
        thetas = np.broadcast_to(np.asarray(theta, dtype=float), (arr.shape[0],))
        return np.stack([_rotate_one(arr[b], thetas[b]) for b in range(arr.shape[0])])

    d, batched = _check_grid_shape(v.data.shape)
    if not batched:
        maps = [rotation_index_map(d, float(theta))]
        items = v.data[None]
    else:
        thetas = np.broadcast_to(np.asarray(theta, dtype=float), (v.data.shape[0],))
        maps = [rotation_index_map(d, t) for t in thetas]
        items = v.data
    outs = []
    for b, (si, sj, valid) in enumerate(maps):
        gathered = items[b][si.clip(0, d - 1), sj.clip(0, d - 1), :]
        outs.append(np.where(valid[:, :, None], gathered, FILL_EMPTY))
    out = np.stack(outs) if batched else outs[0]

    def vjp(g):
        gb = g if batched else g[None]
        gv = np.zeros_like(items)
        for b, (si, sj, valid) in enumerate(maps):
            np.add.at(gv[b], (si[valid], sj[valid]), gb[b][valid])
        return (gv if batched else gv[0],)

    return Tensor._from_op(out, "rotate_z", (v,), vjp)


def project_min(v):
    """Min over the depth axis: (..., d, d, d) -> (..., d, d) image (j, k).

    The subgradient routes each pixel's gradient to the first cell along
    the depth axis attaining the minimum.
    """
    if not isinstance(v, Tensor):
        arr = np.asarray(v, dtype=float)
        _check_grid_shape(arr.shape, "project_min")
        return arr.min(axis=-3)
    _check_grid_shape(v.data.shape, "project_min")
    data = v.data
    out = data.min(axis=-3)

    def vjp(g):
        amin = np.expand_dims(data.argmin(axis=-3), -3)  # first occurrence
        gv = np.zeros_like(data)
        np.put_along_axis(gv, amin, np.expand_dims(g, -3), axis=-3)
        return (gv,)

    return Tensor._from_op(out, "project_min", (v,), vjp)


def project_at(v, theta):
    """Silhouette of the grid seen from azimuth ``theta``: rotate, then min."""
    return project_min(rotate_z(v, theta))


def carve_hull(silhouettes, angles) -> np.ndarray:
    """Visual hull: the largest grid consistent with the given silhouettes.

    A voxel stays occupied (0) only if every view samples it onto an object
    pixel; any background pixel empties all voxels it would read through
    the same index map ``project_at`` uses, so re-projecting the hull never
    puts object where a silhouette has background.
    """
    sils = [np.asarray(s) for s in silhouettes]
    angles = [float(a) for a in angles]
    if len(sils) != len(angles):
        raise ValueError(
            f"carve_hull: {len(sils)} silhouettes but {len(angles)} angles"
        )
    if not sils:
        raise ValueError("carve_hull: at least one view is required")
    d = sils[0].shape[0]
    for s in sils:
        if s.shape != (d, d):
            raise ValueError(f"carve_hull: silhouette shapes disagree: {s.shape} vs {(d, d)}")
    ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    empty = np.zeros((d, d, d), dtype=bool)
    for sil, theta in zip(sils, angles):
        bg = np.asarray(sil, dtype=float) >= 0.5  # 1 = background
        si, sj, valid = rotation_index_map(d, theta)
        rows = bg[jj[valid], :]  # background along k for each sampled cell
        np.logical_or.at(empty, (si[valid], sj[valid]), rows)
    return np.where(empty, 1.0, 0.0)


# ---------------------------------------------------------------------------
# VOX text format: "VOX <d>" header, then d^3 reals row-major

def save_vox(path, grid) -> None:
    arr = np.asarray(grid, dtype=np.float64)
    d, batched = _check_grid_shape(arr.shape, "save_vox")
    if batched:
        raise ValueError("save_vox: one grid per file")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"VOX {d}\n")
        flat = arr.reshape(d * d, d)
        for row in flat:
            fh.write(" ".join(f"{v:.17g}" for v in row))
            fh.write("\n")


def load_vox(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "VOX":
            raise ValueError(f"{path}: not a VOX file (header {header!r})")
        d = int(header[1])
        values = np.array(fh.read().split(), dtype=np.float64)
    if values.size != d * d * d:
        raise ValueError(f"{path}: expected {d**3} values, found {values.size}")
    return values.reshape(d, d, d)
