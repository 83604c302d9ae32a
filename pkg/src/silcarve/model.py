"""Order-agnostic multi-view silhouette prediction network.

Each input view runs through a shared-weight convolutional tower whose
azimuth enters as (sin, cos) through a small MLP broadcast onto an
intermediate feature map.  The per-view feature vectors are pooled with an
elementwise max (or mean), so predictions are invariant to view order and,
under max pooling, to duplication.  A 2-D decoder conditioned on the query
azimuth emits a silhouette probability map directly; a 3-D decoder emits a
voxel occupancy grid that is rendered through the differentiable
min-projection in :mod:`.voxel`.

Probability convention matches the data: 0 = object, so the network
predicts the probability that a pixel is background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import voxel
from .autodiff import (
    Tensor,
    avg_over_set,
    concat,
    conv2d,
    conv_transpose,
    crop_center,
    matmul,
    max_over_set,
    relu,
    reshape,
    resize_nn,
    sigmoid,
    tile_spatial,
)

__all__ = [
    "Hyperparams",
    "ModelParams",
    "Checkpoint",
    "angle_encoding",
    "default_enc_channels",
    "param_specs",
    "encode_view",
    "fuse",
    "decode2d",
    "decode3d",
    "predict",
    "encode_batch",
    "decode2d_batch",
    "decode3d_batch",
    "predict_batch",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "silcarve-checkpoint"


def _downsample_sizes(h: int):
    """Feature-map sizes through the stride-2 encoder: halve while even."""
    sizes = [h]
    while sizes[-1] % 2 == 0 and sizes[-1] > 2:
        sizes.append(sizes[-1] // 2)
    return sizes


def default_enc_channels(h: int) -> tuple:
    n_down = len(_downsample_sizes(h)) - 1
    return tuple(min(8 << i, 64) for i in range(n_down))


@dataclass(frozen=True)
class Hyperparams:
    image_size: int = 32
    feature_dim: int = 128
    voxel_size: int = 25
    pooling: str = "max"
    angle_dim: int = 16
    enc_channels: tuple = (8, 16, 32, 64)
    dec_channels: int = 64
    dec3d_channels: int = 32

    def __post_init__(self):
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        sizes = _downsample_sizes(self.image_size)
        n_down = len(sizes) - 1
        if n_down < 1 or not (2 <= sizes[-1] <= 7):
            raise ValueError(
                f"image_size {self.image_size} cannot be reduced to a small map "
                "by halving; use a size like 8, 16, 32, or 112"
            )
        if len(self.enc_channels) != n_down:
            raise ValueError(
                f"enc_channels {self.enc_channels} must list {n_down} widths "
                f"for image_size {self.image_size}"
            )
        _decoder2d_plan_for(self.image_size, self.dec_channels)  # validates
        if self.voxel_size <= 3:
            raise ValueError(f"voxel_size must exceed 3, got {self.voxel_size}")


@dataclass
class ModelParams:
    hp: Hyperparams
    tensors: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: ModelParams
    mean_image: np.ndarray
    meta: dict


def angle_encoding(theta_deg: float) -> np.ndarray:
    """(sin, cos) of the azimuth: continuous across the 360/0 wrap."""
    th = math.radians(float(theta_deg))
    return np.array([math.sin(th), math.cos(th)])


def _angle_features(thetas) -> np.ndarray:
    th = np.radians(np.asarray(thetas, dtype=np.float64).reshape(-1))
    return np.stack([np.sin(th), np.cos(th)], axis=1)


# ---------------------------------------------------------------------------
# architecture plans

def _encoder_plan(hp: Hyperparams):
    sizes = _downsample_sizes(hp.image_size)
    n_down = len(sizes) - 1
    angle_after = min(2, n_down)
    last_ch = hp.enc_channels[-1]
    if angle_after == n_down:  # angle channels ride into the flatten
        last_ch += hp.angle_dim
    flat = last_ch * sizes[-1] * sizes[-1]
    return sizes, n_down, angle_after, flat


def _decoder2d_plan_for(h: int, c0: int):
    s, m = h, 0
    while s % 2 == 0 and s > 7:
        s //= 2
        m += 1
    if m < 1 or s < 4:
        raise ValueError(f"image_size {h} has no 2-D decoder plan (base {s}, ups {m})")
    channels = [c0] + [max(c0 >> i, 8) for i in range(1, m + 1)]
    return s, m, channels


def _decoder2d_plan(hp: Hyperparams):
    return _decoder2d_plan_for(hp.image_size, hp.dec_channels)


def _decoder3d_plan(hp: Hyperparams):
    sizes = [3]
    while sizes[-1] < hp.voxel_size:
        sizes.append(2 * sizes[-1] + 1)  # stride-2 transpose with kernel 3
    m = len(sizes) - 1
    c0 = hp.dec3d_channels
    channels = [c0] + [max(c0 >> i, 8) for i in range(1, m)] + [1]
    return sizes, m, channels


def param_specs(hp: Hyperparams):
    """Ordered (name, shape, kind) for every learnable tensor."""
    specs = []

    def w(name, shape):
        specs.append((name, tuple(shape), "weight"))

    def b(name, shape):
        specs.append((name, tuple(shape), "bias"))

    sizes, n_down, angle_after, flat = _encoder_plan(hp)
    in_ch = 1
    for i in range(1, n_down + 1):
        out_ch = hp.enc_channels[i - 1]
        w(f"enc.conv{i}.w", (out_ch, in_ch, 4, 4))
        b(f"enc.conv{i}.b", (out_ch, 1, 1))
        in_ch = out_ch
        if i == angle_after:
            in_ch += hp.angle_dim
    w("enc.angle.fc1.w", (2, hp.angle_dim))
    b("enc.angle.fc1.b", (hp.angle_dim,))
    w("enc.angle.fc2.w", (hp.angle_dim, hp.angle_dim))
    b("enc.angle.fc2.b", (hp.angle_dim,))
    w("enc.fc.w", (flat, hp.feature_dim))
    b("enc.fc.b", (hp.feature_dim,))

    base, m, channels = _decoder2d_plan(hp)
    w("dec2d.fc.w", (hp.feature_dim + 2, channels[0] * base * base))
    b("dec2d.fc.b", (channels[0] * base * base,))
    for i in range(1, m + 1):
        w(f"dec2d.up{i}.w", (channels[i - 1], channels[i], 2, 2))
        b(f"dec2d.up{i}.b", (channels[i], 1, 1))
        if i > m - 2:
            w(f"dec2d.refine{i}.w", (channels[i], channels[i], 3, 3))
            b(f"dec2d.refine{i}.b", (channels[i], 1, 1))
    w("dec2d.out.w", (1, channels[m], 3, 3))
    b("dec2d.out.b", (1, 1, 1))

    sizes3, m3, channels3 = _decoder3d_plan(hp)
    w("dec3d.fc.w", (hp.feature_dim, channels3[0] * 27))
    b("dec3d.fc.b", (channels3[0] * 27,))
    for i in range(1, m3 + 1):
        w(f"dec3d.up{i}.w", (channels3[i - 1], channels3[i], 3, 3, 3))
        b(f"dec3d.up{i}.b", (channels3[i], 1, 1, 1))
    return specs


# ---------------------------------------------------------------------------
# forward passes (batch-first; per-sample wrappers below)

def encode_batch(params: ModelParams, images, thetas) -> Tensor:
    """Encode (B,1,h,h) images with azimuths (B,) to (B,F) features."""
    hp = params.hp
    p = params.tensors
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[1] != 1 or imgs.shape[2:] != (hp.image_size,) * 2:
        raise ValueError(
            f"encode_batch: expected (B,1,{hp.image_size},{hp.image_size}), got {imgs.shape}"
        )
    sizes, n_down, angle_after, flat = _encoder_plan(hp)
    ang = Tensor(_angle_features(thetas))
    a = relu(matmul(ang, p["enc.angle.fc1.w"]) + p["enc.angle.fc1.b"])
    a = relu(matmul(a, p["enc.angle.fc2.w"]) + p["enc.angle.fc2.b"])
    x = Tensor(imgs)
    for i in range(1, n_down + 1):
        x = relu(conv2d(x, p[f"enc.conv{i}.w"], stride=2, pad=1) + p[f"enc.conv{i}.b"])
        if i == angle_after:
            s = sizes[i]
            x = concat([x, tile_spatial(a, (s, s))], axis=1)
    x = reshape(x, (imgs.shape[0], flat))
    # linear (signed) features: averaging towers can cancel view-specific
    # evidence, max keeps it — the poolings stay honestly distinguishable
    return matmul(x, p["enc.fc.w"]) + p["enc.fc.b"]


def fuse(params: ModelParams, features) -> Tensor:
    """Pool a non-empty set of per-view features into one vector."""
    feats = list(features)
    if not feats:
        raise ValueError("fuse: at least one feature vector is required")
    if params.hp.pooling == "max":
        return max_over_set(feats)
    return avg_over_set(feats)


def decode2d_batch(params: ModelParams, fused: Tensor, thetas_out) -> Tensor:
    """Decode fused features (B,F) to (B,h,h) silhouette probabilities."""
    hp = params.hp
    p = params.tensors
    base, m, channels = _decoder2d_plan(hp)
    bsz = fused.data.shape[0]
    ang = Tensor(_angle_features(thetas_out))
    x = concat([fused, ang], axis=1)
    x = relu(matmul(x, p["dec2d.fc.w"]) + p["dec2d.fc.b"])
    x = reshape(x, (bsz, channels[0], base, base))
    for i in range(1, m + 1):
        x = relu(conv_transpose(x, p[f"dec2d.up{i}.w"], stride=2, dims=2) + p[f"dec2d.up{i}.b"])
        if i > m - 2:
            x = relu(conv2d(x, p[f"dec2d.refine{i}.w"], stride=1, pad=1) + p[f"dec2d.refine{i}.b"])
    x = conv2d(x, p["dec2d.out.w"], stride=1, pad=1) + p["dec2d.out.b"]
    return reshape(sigmoid(x), (bsz, hp.image_size, hp.image_size))


def decode3d_batch(params: ModelParams, fused: Tensor) -> Tensor:
    """Decode fused features (B,F) to a (B,d,d,d) occupancy grid in (0,1)."""
    hp = params.hp
    p = params.tensors
    sizes3, m3, channels3 = _decoder3d_plan(hp)
    bsz = fused.data.shape[0]
    x = relu(matmul(fused, p["dec3d.fc.w"]) + p["dec3d.fc.b"])
    x = reshape(x, (bsz, channels3[0], 3, 3, 3))
    for i in range(1, m3 + 1):
        x = conv_transpose(x, p[f"dec3d.up{i}.w"], stride=2, dims=3) + p[f"dec3d.up{i}.b"]
        if i < m3:
            x = relu(x)
    d = hp.voxel_size
    x = crop_center(x, (d, d, d))
    x = reshape(x, (bsz, d, d, d))
    return sigmoid(x)


def _normalize_mode(mode: str) -> str:
    m = str(mode).lower()
    if m not in ("2d", "3d"):
        raise ValueError(f"mode must be '2D' or '3D', got {mode!r}")
    return m


def predict_batch(params: ModelParams, images, thetas, thetas_out, mode="2d") -> Tensor:
    """Batched prediction: (B,N,1,h,h) views -> (B,h,h) probability maps."""
    mode = _normalize_mode(mode)
    hp = params.hp
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 5:
        raise ValueError(f"predict_batch: expected (B,N,1,h,h) images, got {imgs.shape}")
    n_views = imgs.shape[1]
    if n_views < 1:
        raise ValueError("predict_batch: at least one view is required")
    th = np.asarray(thetas, dtype=np.float64).reshape(imgs.shape[0], n_views)
    feats = [encode_batch(params, imgs[:, n], th[:, n]) for n in range(n_views)]
    fused = fuse(params, feats)
    if mode == "2d":
        return decode2d_batch(params, fused, thetas_out)
    grid = decode3d_batch(params, fused)
    img = voxel.project_at(grid, np.asarray(thetas_out, dtype=np.float64))
    if hp.voxel_size != hp.image_size:
        img = resize_nn(img, (hp.image_size, hp.image_size))
    return img


# per-sample API

def encode_view(params: ModelParams, view) -> Tensor:
    """Feature vector (F,) for one view (an object with .image and .theta)."""
    hp = params.hp
    img = np.asarray(view.image, dtype=np.float64)
    if img.shape != (hp.image_size, hp.image_size):
        raise ValueError(
            f"encode_view: image shape {img.shape} does not match h={hp.image_size}"
        )
    out = encode_batch(params, img[None, None], [view.theta])
    return reshape(out, (hp.feature_dim,))


def decode2d(params: ModelParams, fused: Tensor, theta_out: float) -> Tensor:
    """Silhouette probabilities (h,h) for the query azimuth."""
    out = decode2d_batch(params, reshape(fused, (1, params.hp.feature_dim)), [theta_out])
    return reshape(out, (params.hp.image_size,) * 2)


def decode3d(params: ModelParams, fused: Tensor) -> Tensor:
    """Occupancy grid (d,d,d); azimuth-free, rendered via projection."""
    out = decode3d_batch(params, reshape(fused, (1, params.hp.feature_dim)))
    return reshape(out, (params.hp.voxel_size,) * 3)


def predict(params: ModelParams, views, theta_out: float, mode="2d") -> Tensor:
    """Probability map (h,h) for a novel azimuth given a set of views.

    Bit-identical under any permutation of ``views`` and, with max pooling,
    under duplication of a view.
    """
    mode = _normalize_mode(mode)
    views = list(views)
    if not views:
        raise ValueError("predict: at least one view is required")
    hp = params.hp
    imgs = np.stack([np.asarray(v.image, dtype=np.float64) for v in views])
    if imgs.shape[1:] != (hp.image_size, hp.image_size):
        raise ValueError(
            f"predict: view images must be {hp.image_size}x{hp.image_size}, got {imgs.shape[1:]}"
        )
    thetas = np.array([[v.theta for v in views]], dtype=np.float64)
    out = predict_batch(params, imgs[None, :, None], thetas, [theta_out], mode)
    return reshape(out, (hp.image_size,) * 2)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float32 payloads

def _hp_to_json(hp: Hyperparams) -> dict:
    return {
        "image_size": hp.image_size,
        "feature_dim": hp.feature_dim,
        "voxel_size": hp.voxel_size,
        "pooling": hp.pooling,
        "angle_dim": hp.angle_dim,
        "enc_channels": list(hp.enc_channels),
        "dec_channels": hp.dec_channels,
        "dec3d_channels": hp.dec3d_channels,
    }


def _hp_from_json(d: dict) -> Hyperparams:
    d = dict(d)
    d["enc_channels"] = tuple(d["enc_channels"])
    return Hyperparams(**d)


def save_checkpoint(path, params: ModelParams, mean_image, meta=None) -> None:
    mean = np.asarray(mean_image, dtype=np.float64)
    names = [name for name, _, _ in param_specs(params.hp)]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "hparams": _hp_to_json(params.hp),
        "tensors": [
            {"name": n, "shape": list(params.tensors[n].data.shape)} for n in names
        ],
        "buffers": [{"name": "mean_image", "shape": list(mean.shape)}],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        for n in names:
            fh.write(params.tensors[n].data.astype("<f4").tobytes())
        fh.write(mean.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a model checkpoint")
        hp = _hp_from_json(header["hparams"])
        expected = param_specs(hp)
        stored = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
        if [(n, s) for n, s, _ in expected] != stored:
            raise ValueError(f"{path}: stored tensors do not match the architecture")
        tensors = {}
        for name, shape in stored:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            arr = np.frombuffer(buf, dtype="<f4", count=count).astype(np.float64)
            tensors[name] = Tensor(arr.reshape(shape), requires_grad=True)
        buffers = {}
        for spec in header["buffers"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            buffers[spec["name"]] = (
                np.frombuffer(buf, dtype="<f4", count=count).astype(np.float64).reshape(shape)
            )
    params = ModelParams(hp=hp, tensors=tensors)
    return Checkpoint(params=params, mean_image=buffers["mean_image"], meta=header["meta"])
