"""Procedural blobby objects: metaball solids, ray-marched views, datasets.

A blob is an implicit solid {x : f(x) >= iso} with
f(x) = sum_k w_k / (|x - c_k|^2 + 1e-6).  Solids are rejected until they
are nonempty, fit inside the 0.9-radius ball, and show a reasonable
silhouette from probe azimuths, so every stored view keeps the object
between 5% and 70% of the pixels.

World frame: x is depth (the camera looks along +x), y is horizontal, z is
vertical (the rotation axis).  A rendered image is indexed (j, k) = (y, z)
to match the voxel projection layout, and both images and masks use
0 = object/dark-free background conventions described in :mod:`.pgm`.
Angles are degrees.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgm

__all__ = [
    "BlobSpec",
    "View",
    "ObjectViews",
    "Dataset",
    "field",
    "field_gradient",
    "sample_blob",
    "render_view",
    "silhouette",
    "build_dataset",
    "load_dataset",
    "thread_count",
    "FIELD_EPS",
]

FIELD_EPS = 1e-6
CONTAIN_RADIUS = 0.9
COVER_MIN, COVER_MAX = 0.05, 0.70
# sampler probes use a tighter band so stored views stay inside the real one
_PROBE_MIN, _PROBE_MAX = 0.065, 0.62
_PROBE_ANGLES = (0.0, 30.0, 60.0, 90.0, 120.0)
_MAX_DRAWS = 1000
DEFAULT_LIGHT = (0.58, -0.29, 0.76)


def thread_count() -> int:
    """Worker cap: SILCARVE_THREADS if set, else the machine's cores."""
    env = os.environ.get("SILCARVE_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"SILCARVE_THREADS must be positive, got {env!r}")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class BlobSpec:
    """Metaball solid: centers (K,3), positive weights (K,), iso threshold."""

    seed: int
    centers: np.ndarray
    weights: np.ndarray
    iso: float


@dataclass(frozen=True)
class View:
    """One rendered grayscale view and the azimuth it was rendered from."""

    image: np.ndarray
    theta: float


@dataclass(frozen=True)
class ObjectViews:
    """A dataset object: its stored views with matching silhouette masks."""

    obj_id: str
    split: str
    seed: int
    views: list
    sils: list


class Dataset:
    def __init__(self, root, image_size: int, objects: list):
        self.root = Path(root)
        self.image_size = int(image_size)
        self.objects = objects

    def split(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [o for o in self.objects if o.split == name]

    @property
    def views_per_object(self) -> int:
        return len(self.objects[0].views) if self.objects else 0

    def __len__(self):
        return len(self.objects)


# ---------------------------------------------------------------------------
# implicit field

def field(blob: BlobSpec, points: np.ndarray) -> np.ndarray:
    """Field values at ``points`` (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    diff = p[..., None, :] - blob.centers  # (..., K, 3)
    d2 = (diff * diff).sum(axis=-1) + FIELD_EPS
    return (blob.weights / d2).sum(axis=-1)


def field_gradient(blob: BlobSpec, points: np.ndarray) -> np.ndarray:
    """Analytic gradient of the field at ``points`` (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    diff = p[..., None, :] - blob.centers
    d2 = (diff * diff).sum(axis=-1) + FIELD_EPS
    coef = -2.0 * blob.weights / (d2 * d2)  # d/dx of w/(d2)
    return (coef[..., None] * diff).sum(axis=-2)


def _solid_ok(blob: BlobSpec, probe: int = 49) -> bool:
    """Nonempty and contained in the 0.9 ball, checked on a probe lattice."""
    axis = np.linspace(-1.0, 1.0, probe)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    inside = field(blob, pts) >= blob.iso
    if not inside.any():
        return False
    radii = np.linalg.norm(pts[inside], axis=1)
    return bool(radii.max() <= CONTAIN_RADIUS)


def sample_blob(seed: int) -> BlobSpec:
    """Draw a valid blob deterministically from ``seed``.

    Rejection-samples candidate center/weight sets; gives up with a
    diagnostic after 1000 draws.
    """
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_DRAWS):
        k = int(rng.integers(3, 9))
        centers = rng.uniform(-0.4, 0.4, size=(k, 3))
        weights = rng.uniform(0.07, 0.13, size=k)
        blob = BlobSpec(seed=int(seed), centers=centers, weights=weights, iso=1.0)
        if not _solid_ok(blob):
            continue
        covers = [_coverage(blob, th, 25) for th in _PROBE_ANGLES]
        if all(_PROBE_MIN <= c <= _PROBE_MAX for c in covers):
            return blob
    raise ValueError(f"sample_blob: no valid blob within {_MAX_DRAWS} draws (seed {seed})")


# ---------------------------------------------------------------------------
# rendering

def _pixel_axes(h: int):
    return (np.arange(h) - (h - 1) / 2.0) * (2.0 / h)


def _ray_points(theta: float, h: int):
    """Sample points for every pixel ray, rotated into the object frame.

    Rays run along +x from -1 to 1 with step 1/h (half a pixel of the
    2-unit scene extent); the object is rotated by theta about z, which is
    the same as sampling the field at R_z(theta) applied to camera coords.
    """
    ys = _pixel_axes(h)
    zs = _pixel_axes(h)
    xs = np.linspace(-1.0, 1.0, 2 * h + 1)
    th = math.radians(theta)
    cos_t, sin_t = math.cos(th), math.sin(th)
    px = cos_t * xs[None, :] - sin_t * ys[:, None]  # (h_j, T)
    py = sin_t * xs[None, :] + cos_t * ys[:, None]
    pts = np.empty((h, h, xs.size, 3))
    pts[..., 0] = px[:, None, :]
    pts[..., 1] = py[:, None, :]
    pts[..., 2] = zs[None, :, None]
    return pts, xs


def silhouette(blob: BlobSpec, theta: float, h: int) -> np.ndarray:
    """Mask of pixels whose ray crosses the solid (0 = object)."""
    pts, _ = _ray_points(theta, h)
    hit = (field(blob, pts) >= blob.iso).any(axis=-1)
    return np.where(hit, 0, 1).astype(np.uint8)


def _coverage(blob: BlobSpec, theta: float, h: int) -> float:
    return float((silhouette(blob, theta, h) == 0).mean())


def render_view(blob: BlobSpec, theta: float, h: int, w: int, light=None):
    """Ray-march one view; returns (View, silhouette mask).

    The surface point is located at the first iso-crossing along the ray
    with one bisection refinement, then shaded max(0, n.l) with n the
    normalized field gradient rotated into the camera frame.
    """
    if h != w:
        raise ValueError(f"render_view: images must be square, got {h}x{w}")
    if h < 16:
        raise ValueError(f"render_view: image size must be >= 16, got {h}")
    if light is None:
        light = DEFAULT_LIGHT
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)

    pts, xs = _ray_points(theta, h)
    vals = field(blob, pts)
    inside = vals >= blob.iso
    hit = inside.any(axis=-1)
    image = np.zeros((h, h), dtype=np.float64)
    if hit.any():
        first = inside[hit].argmax(axis=-1)  # first sample at or past the surface
        rows = pts[hit]  # (M, T, 3)
        m_idx = np.arange(first.size)
        # the ray starts outside the solid (it is confined to the 0.9 ball),
        # so first >= 1 and the previous sample is a valid outside bracket
        lo = rows[m_idx, first - 1]
        hi = rows[m_idx, first]
        mid = 0.5 * (lo + hi)
        mid_in = field(blob, mid) >= blob.iso
        lo = np.where(mid_in[:, None], lo, mid)
        hi = np.where(mid_in[:, None], mid, hi)
        surf = 0.5 * (lo + hi)
        grad = field_gradient(blob, surf)
        norms = np.linalg.norm(grad, axis=-1, keepdims=True)
        normal = grad / np.maximum(norms, 1e-12)
        # rotate the world-frame normal back into the camera frame
        th = math.radians(theta)
        cos_t, sin_t = math.cos(th), math.sin(th)
        n_cam = np.empty_like(normal)
        n_cam[:, 0] = cos_t * normal[:, 0] + sin_t * normal[:, 1]
        n_cam[:, 1] = -sin_t * normal[:, 0] + cos_t * normal[:, 1]
        n_cam[:, 2] = normal[:, 2]
        shade = np.maximum(0.0, n_cam @ light)
        image[hit] = shade
    sil = np.where(hit, 0, 1).astype(np.uint8)
    return View(image=image, theta=float(theta)), sil


# ---------------------------------------------------------------------------
# dataset build / load

def _split_counts(n: int):
    n_train = int(0.75 * n + 0.5)
    n_val = int(0.10 * n + 0.5)
    return n_train, n_val, n - n_train - n_val


def _mixed_seed(base: int, salt: int) -> int:
    return int(np.random.SeedSequence([int(base), int(salt)]).generate_state(1, np.uint64)[0])


def _make_object(base_seed: int, thetas, lights, h: int):
    """Sample a blob and render all its views; re-sample on bad coverage."""
    for retry in range(50):
        seed = _mixed_seed(base_seed, retry)
        blob = sample_blob(seed)
        views, sils = [], []
        ok = True
        for theta, light in zip(thetas, lights):
            view, sil = render_view(blob, theta, h, h, light=light)
            cover = float((sil == 0).mean())
            if not (COVER_MIN <= cover <= COVER_MAX):
                ok = False
                break
            views.append(view)
            sils.append(sil)
        if ok:
            return seed, views, sils
    raise ValueError(f"dataset object: coverage never satisfied for seed {base_seed}")


def build_dataset(n_objects: int, n_views: int = 5, h: int = 32, seed: int = 0,
                  out_dir=None) -> "Dataset":
    """Generate a dataset of blobby objects with ray-marched views.

    Azimuths are drawn independently and uniformly from [0, 120] degrees
    per view.  Objects are split 75/10/15 train/val/test by count, each
    object entirely inside one split.  With the same arguments the output
    files are byte-identical run to run.
    """
    if n_objects < 10:
        raise ValueError(f"build_dataset: need at least 10 objects, got {n_objects}")
    if out_dir is None:
        raise ValueError("build_dataset: out_dir is required")
    out = Path(out_dir)
    master = np.random.default_rng(seed)
    plans = []
    for idx in range(n_objects):
        base_seed = int(master.integers(0, 2**63 - 1))
        thetas = master.uniform(0.0, 120.0, size=n_views)
        raw = master.normal(size=(n_views, 3))
        raw[:, 0] = np.abs(raw[:, 0]) + 0.2  # keep some light toward the camera
        lights = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        plans.append((base_seed, thetas, lights))

    workers = min(thread_count(), n_objects)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(
                pool.map(lambda p: _make_object(p[0], p[1], p[2], h), plans)
            )
    else:
        rendered = [_make_object(b, t, l, h) for b, t, l in plans]

    n_train, n_val, _ = _split_counts(n_objects)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    objects = []
    with open(out / "manifest.jsonl", "w", encoding="ascii") as manifest:
        for idx, ((base_seed, thetas, _lights), (spec_seed, views, sils)) in enumerate(
            zip(plans, rendered)
        ):
            obj_id = f"{idx:04d}"
            split = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")
            # the PGM files are the dataset: keep the returned views equal to
            # their on-disk round-trip so building and loading are equivalent
            views = [View(image=pgm.to_uint8(v.image).astype(np.float64) / 255.0,
                          theta=v.theta) for v in views]
            obj_dir = out / "objects" / obj_id
            obj_dir.mkdir(parents=True, exist_ok=True)
            view_records = []
            for m, (view, sil) in enumerate(zip(views, sils)):
                img_rel = f"objects/{obj_id}/view{m}.pgm"
                sil_rel = f"objects/{obj_id}/sil{m}.pgm"
                pgm.write_pgm(out / img_rel, view.image)
                pgm.write_mask(out / sil_rel, sil)
                view_records.append(
                    {"image": img_rel, "sil": sil_rel, "theta": float(view.theta)}
                )
            record = {
                "id": obj_id,
                "seed": int(spec_seed),
                "split": split,
                "views": view_records,
            }
            manifest.write(json.dumps(record, sort_keys=True))
            manifest.write("\n")
            objects.append(
                ObjectViews(obj_id=obj_id, split=split, seed=int(spec_seed),
                            views=views, sils=sils)
            )
    return Dataset(root=out, image_size=h, objects=objects)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    objects = []
    image_size = None
    with open(manifest_path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            views, sils = [], []
            for vr in rec["views"]:
                img = pgm.read_pgm(root / vr["image"]).astype(np.float64) / 255.0
                sil = pgm.read_mask(root / vr["sil"])
                if image_size is None:
                    image_size = img.shape[0]
                views.append(View(image=img, theta=float(vr["theta"])))
                sils.append(sil)
            objects.append(
                ObjectViews(obj_id=rec["id"], split=rec["split"], seed=int(rec["seed"]),
                            views=views, sils=sils)
            )
    if image_size is None:
        raise ValueError(f"{manifest_path}: manifest lists no objects")
    return Dataset(root=root, image_size=image_size, objects=objects)
