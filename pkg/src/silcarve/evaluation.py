"""Metrics, deterministic evaluation, the experiment matrix, and output dumps.

Masks follow the dataset convention: 0 = object, 1 = background.  The
network emits background probability, so ``binarize`` maps prob > 0.5 to 1
(background) and everything else — including an exact 0.5 — to 0 (object).
"""

from __future__ import annotations

import json
import os
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import model, pgm, voxel
from .autodiff import Tensor
from .blobs import View

__all__ = [
    "binarize",
    "iou",
    "iou_soft",
    "IoUReport",
    "evaluate",
    "CarveReport",
    "carve_check",
    "ExperimentMatrix",
    "run_matrix",
    "render_outputs",
]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(prob) -> np.ndarray:
    """Probability map -> {0,1} mask; strict: prob must exceed 0.5 to be 1."""
    return (_as_array(prob) > 0.5).astype(np.uint8)


def iou(pred, truth) -> float:
    """Intersection-over-union of the object (value-0) pixels."""
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"iou: shape mismatch {p.shape} vs {t.shape}")
    p_obj, t_obj = p == 0, t == 0
    union = np.count_nonzero(p_obj | t_obj)
    if union == 0:
        return 1.0  # both agree there is no object
    return np.count_nonzero(p_obj & t_obj) / union


def iou_soft(pred, truth_soft) -> float:
    """Soft-mask IoU: Σ I·S̄ over count(I + S̄ > 0.9), with I = object indicator.

    ``truth_soft`` holds object probability in [0, 1].  A zero denominator
    returns 0 with a warning.
    """
    p, s = _as_array(pred), np.asarray(truth_soft, dtype=np.float64)
    if p.shape != s.shape:
        raise ValueError(f"iou_soft: shape mismatch {p.shape} vs {s.shape}")
    ind = (p == 0).astype(np.float64)
    den = np.count_nonzero(ind + s > 0.9)
    if den == 0:
        warnings.warn("iou_soft: empty effective union, returning 0", RuntimeWarning)
        return 0.0
    return float((ind * s).sum()) / den


@dataclass
class IoUReport:
    values: list
    per_object: dict
    mean_iou: float
    count: int
    n_towers_test: int
    mode: str
    split: str
    pooling: str
    n_towers_train: int = 0  # 0 = unknown (params given without checkpoint meta)


def view_selection(obj_id: str, n_views: int, eval_seed: int):
    """Deterministic (target, ordered input pool) for one object.

    The pool at k towers is the first k entries, so tower counts nest and
    every variant sees identical view choices.
    """
    key = np.random.SeedSequence([eval_seed, zlib.crc32(obj_id.encode("utf-8"))])
    perm = np.random.default_rng(key).permutation(n_views)
    return int(perm[0]), [int(i) for i in perm[1:]]


def evaluate(checkpoint, dataset, k: int, mode: str = "2d", split: str = "test",
             eval_seed: int = 1234, mean_image=None, batch_size: int = 64) -> IoUReport:
    """Mean IoU of binarized predictions over a split at k input views.

    ``checkpoint`` is a file path or a ModelParams (then ``mean_image``
    should be supplied; it defaults to zeros).
    """
    n_towers_train = 0
    if isinstance(checkpoint, (str, os.PathLike)):
        ck = model.load_checkpoint(checkpoint)
        params, mean_image = ck.params, ck.mean_image
        n_towers_train = int(ck.meta.get("n_views", 0))
        mode = ck.meta.get("mode", mode)
    else:
        params = checkpoint
    hp = params.hp
    if mean_image is None:
        mean_image = np.zeros((hp.image_size, hp.image_size))
    objs = sorted(dataset.split(split), key=lambda o: o.obj_id)
    if not objs:
        raise ValueError(f"evaluate: split {split!r} is empty")
    if k < 1 or k + 1 > dataset.views_per_object:
        raise ValueError(
            f"evaluate: k={k} needs k+1 <= {dataset.views_per_object} views per object"
        )
    h = hp.image_size
    values, per_object = [], {}
    for lo in range(0, len(objs), batch_size):
        chunk = objs[lo : lo + batch_size]
        bsz = len(chunk)
        imgs = np.empty((bsz, k, 1, h, h))
        thetas = np.empty((bsz, k))
        theta_out = np.empty(bsz)
        gts = []
        for bi, obj in enumerate(chunk):
            target, pool = view_selection(obj.obj_id, len(obj.views), eval_seed)
            for vi, m in enumerate(pool[:k]):
                imgs[bi, vi, 0] = np.asarray(obj.views[m].image, dtype=np.float64) - mean_image
                thetas[bi, vi] = obj.views[m].theta
            theta_out[bi] = obj.views[target].theta
            gts.append(np.asarray(obj.sils[target]))
        pred = model.predict_batch(params, imgs, thetas, theta_out, mode).data
        for bi, obj in enumerate(chunk):
            v = iou(binarize(pred[bi]), gts[bi])
            values.append(v)
            per_object[obj.obj_id] = v
    return IoUReport(
        values=values,
        per_object=per_object,
        mean_iou=float(np.mean(values)),
        count=len(values),
        n_towers_test=k,
        mode=mode,
        split=split,
        pooling=hp.pooling,
        n_towers_train=n_towers_train,
    )


# ---------------------------------------------------------------------------
# visual-hull consistency oracle

def _dilate(mask: np.ndarray, r: int = 1) -> np.ndarray:
    """Binary dilation by a (2r+1)^2 square, without wraparound."""
    out = mask.copy()
    h, w = mask.shape
    for dj in range(-r, r + 1):
        for dk in range(-r, r + 1):
            if dj == 0 and dk == 0:
                continue
            sj = slice(max(dj, 0), h + min(dj, 0))
            sk = slice(max(dk, 0), w + min(dk, 0))
            tj = slice(max(-dj, 0), h + min(-dj, 0))
            tk = slice(max(-dk, 0), w + min(-dk, 0))
            out[tj, tk] |= mask[sj, sk]
    return out


@dataclass
class CarveReport:
    mean_iou: float
    min_iou: float
    per_view: list              # (obj_id, view_index, iou)
    commission_violations: int  # hull-projection object pixels beyond the 1-px band
    n_objects: int


def carve_check(dataset, split: str = "train", n_objects: int = 20,
                seed: int = 0) -> CarveReport:
    """Carve hulls from ground-truth silhouettes and re-project them.

    Model-free consistency oracle for the dataset + projection geometry:
    re-projection must nearly reproduce each silhouette, and may never
    mark object where the silhouette shows background beyond a 1-pixel
    boundary band.  ``seed`` picks the sample when the split is larger
    than ``n_objects``.
    """
    objs = sorted(dataset.split(split), key=lambda o: o.obj_id)
    if not objs:
        raise ValueError(f"carve_check: no objects in split {split!r}")
    if n_objects < len(objs):
        idx = np.random.default_rng(seed).choice(len(objs), size=n_objects, replace=False)
        objs = [objs[i] for i in sorted(idx)]
    per_view = []
    violations = 0
    for obj in objs:
        sils = np.stack([np.asarray(s, dtype=np.float64) for s in obj.sils])
        angles = [v.theta for v in obj.views]
        hull = voxel.carve_hull(sils, angles)
        for m, theta in enumerate(angles):
            reproj = voxel.project_at(hull, theta)
            per_view.append((obj.obj_id, m, iou(reproj, sils[m])))
            commission = (reproj == 0) & (sils[m] == 1)
            band = _dilate(sils[m] == 0, 1)
            violations += int(np.count_nonzero(commission & ~band))
    ious = [v for _, _, v in per_view]
    return CarveReport(
        mean_iou=float(np.mean(ious)),
        min_iou=float(np.min(ious)),
        per_view=per_view,
        commission_violations=violations,
        n_objects=len(objs),
    )


# ---------------------------------------------------------------------------
# experiment matrix

@dataclass
class ExperimentMatrix:
    variants: list
    ks: list
    cells: dict = field(default_factory=dict)  # variant -> {str(k): mean IoU}

    def text_table(self) -> str:
        name_w = max([len("variant")] + [len(v) for v in self.variants])
        header = "variant".ljust(name_w) + "".join(f"  k={k:<6d}" for k in self.ks)
        lines = [header, "-" * len(header)]
        for v in self.variants:
            row = v.ljust(name_w)
            for k in self.ks:
                cell = self.cells.get(v, {}).get(str(k))
                row += "  " + (f"{cell:.4f}  " if cell is not None else "  --    ")
            lines.append(row)
        return "\n".join(lines) + "\n"


def run_matrix(variant_configs, dataset, ks, out_dir, eval_seed: int = 1234,
               log=print) -> ExperimentMatrix:
    """Train (or reuse) each variant, evaluate at every k, emit table + JSON.

    ``variant_configs``: ordered {name: TrainConfig}.  A variant whose
    training or evaluation fails leaves its cells absent; the run continues.
    Reruns reuse saved checkpoints, so cells are bit-identical.
    """
    from . import training  # local import: training depends on this module

    os.makedirs(out_dir, exist_ok=True)
    matrix = ExperimentMatrix(variants=list(variant_configs), ks=list(ks))
    for name, cfg in variant_configs.items():
        run_dir = os.path.join(out_dir, name)
        ckpt = os.path.join(run_dir, "best.ckpt")
        try:
            if not os.path.exists(ckpt):
                cfg = replace(cfg, out_dir=run_dir)
                if log:
                    log(f"[{name}] training ({cfg.mode}, {cfg.n_views} towers, {cfg.pooling})")
                training.train(dataset, cfg, log=None)
            cells = {}
            for k in ks:
                report = evaluate(ckpt, dataset, k=k, split="test", eval_seed=eval_seed)
                cells[str(k)] = report.mean_iou
                if log:
                    log(f"[{name}] k={k}  mean IoU {report.mean_iou:.4f}")
            matrix.cells[name] = cells
        except Exception as exc:  # absent cell, keep going
            if log:
                log(f"[{name}] failed: {exc}")
    with open(os.path.join(out_dir, "matrix.txt"), "w") as fh:
        fh.write(matrix.text_table())
    with open(os.path.join(out_dir, "matrix.json"), "w") as fh:
        json.dump(matrix.cells, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return matrix


# ---------------------------------------------------------------------------
# prediction dumps

def render_outputs(checkpoint, views, theta_list, out_dir, mode: str = "") -> list:
    """Write probability + mask PGMs per query azimuth; VOX grid in 3D mode.

    Returns the list of written paths.  The 3D grid is azimuth-free, so it
    is exported once; re-importing it and projecting reproduces the
    emitted masks bit-exactly.
    """
    ck = model.load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    mode = (mode or ck.meta.get("mode", "2d")).lower()
    params, mean = ck.params, ck.mean_image
    os.makedirs(out_dir, exist_ok=True)
    normalized = [View(image=np.asarray(v.image, dtype=np.float64) - mean, theta=v.theta)
                  for v in views]
    written = []
    thetas = list(theta_list)
    grid = None
    if mode == "3d" and thetas:
        feats = [model.encode_view(params, v) for v in normalized]
        grid = model.decode3d(params, model.fuse(params, feats)).data
        path = os.path.join(out_dir, "grid.vox")
        voxel.save_vox(path, grid)
        written.append(path)
    for i, theta in enumerate(thetas):
        if mode == "2d":
            prob = model.predict(params, normalized, theta, "2d").data
        else:
            img = voxel.project_at(grid, float(theta))
            prob = img if img.shape == (params.hp.image_size,) * 2 else _resize_nn(
                img, params.hp.image_size
            )
        prob_path = os.path.join(out_dir, f"prob_{i:02d}.pgm")
        mask_path = os.path.join(out_dir, f"mask_{i:02d}.pgm")
        pgm.write_pgm(prob_path, pgm.to_uint8(prob))
        pgm.write_mask(mask_path, binarize(prob))
        written.extend([prob_path, mask_path])
    return written


def _resize_nn(img: np.ndarray, h: int) -> np.ndarray:
    src = img.shape[0]
    idx = np.floor(np.arange(h) * (src / h)).astype(np.intp)
    return img[np.ix_(idx, idx)]
