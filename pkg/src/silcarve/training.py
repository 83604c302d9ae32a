"""Optimizers, batching, augmentation, and the training loop.

Training samples (object, view-subset, target-view) triples with
replacement, applies a small vertical pixel jitter to input views only,
subtracts the training-split mean image, and minimizes binary
cross-entropy between predicted and reference silhouettes.  Validation IoU
is computed after every epoch on deterministic view selections; the best
checkpoint is kept.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, model
from .autodiff import Tensor, backward, bce_loss

__all__ = [
    "TrainConfig",
    "TrainResult",
    "SgdMomentum",
    "Adam",
    "xavier_init",
    "init_params",
    "make_batch",
    "shift_vertical",
    "train",
]


def xavier_init(shape, rng) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError(f"xavier_init needs a matrix or kernel shape, got {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    if fan_in + fan_out == 0:
        raise ValueError(f"zero fan for shape {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_params(hp: model.Hyperparams, rng) -> model.ModelParams:
    """Fresh parameters: xavier weights, zero biases, in spec order."""
    tensors = {}
    for name, shape, kind in model.param_specs(hp):
        if kind == "weight":
            data = xavier_init(shape, rng)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return model.ModelParams(hp=hp, tensors=tensors)


class SgdMomentum:
    """Heavy-ball SGD: v <- mu*v + (g + wd*w); w <- w - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, named_tensors, frozen=()):
        frozen = set(frozen)
        for name, t in named_tensors:
            if name in frozen or t.grad is None:
                continue
            g = t.grad
            if g.shape != t.data.shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param {t.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            t.data = t.data - self.lr * v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {}
        self._v = {}
        self._t = {}

    def step(self, named_tensors, frozen=()):
        frozen = set(frozen)
        for name, t in named_tensors:
            if name in frozen or t.grad is None:
                continue
            g = t.grad
            if g.shape != t.data.shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param {t.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            step = self._t.get(name, 0) + 1
            self._t[name] = step
            m = self.beta1 * self._m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(name, 0.0) + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1**step)
            v_hat = v / (1 - self.beta2**step)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    mode: str = "2d"                  # '2d' or '3d'
    n_views: int = 2                  # input views per sample
    pooling: str = "max"
    epochs: int = 40
    batch_size: int = 16
    optimizer: str = "sgd"            # 'sgd' or 'adam'
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    jitter: int = 2                   # max |vertical shift| in pixels, inputs only
    seed: int = 0
    eval_seed: int = 1234
    feature_dim: int = 128
    voxel_size: int = 25
    angle_dim: int = 16
    freeze_encoder: bool = False
    init_from: str = ""               # checkpoint path to warm-start the encoder
    out_dir: str = ""                 # where best.ckpt + train_log.jsonl go ('' = none)


@dataclass
class TrainResult:
    params: model.ModelParams
    mean_image: np.ndarray
    history: list = field(default_factory=list)
    best_val_iou: float = 0.0
    best_path: str = ""


def shift_vertical(img: np.ndarray, s: int) -> np.ndarray:
    """Shift along the vertical image axis by s pixels, filling with 0."""
    if s == 0:
        return img.copy()
    out = np.zeros_like(img)
    if s > 0:
        out[:, s:] = img[:, :-s]
    else:
        out[:, :s] = img[:, -s:]
    return out


def make_batch(rng, objects, n_views, batch_size, jitter, mean_image):
    """Sample a training batch; returns (images, thetas, theta_out, targets).

    Each sample draws an object uniformly with replacement and a random
    view permutation: the first view is held out as the target, the next
    n_views are inputs.  Jitter shifts input images only.
    """
    h = mean_image.shape[0]
    imgs = np.empty((batch_size, n_views, 1, h, h))
    thetas = np.empty((batch_size, n_views))
    theta_out = np.empty(batch_size)
    targets = np.empty((batch_size, h, h))
    for bi in range(batch_size):
        obj = objects[rng.integers(len(objects))]
        if n_views + 1 > len(obj.views):
            raise ValueError(
                f"make_batch: object {obj.obj_id} has {len(obj.views)} views, "
                f"need {n_views + 1}"
            )
        perm = rng.permutation(len(obj.views))
        for vi, m in enumerate(perm[1 : n_views + 1]):
            img = np.asarray(obj.views[m].image, dtype=np.float64)
            if jitter:
                img = shift_vertical(img, int(rng.integers(-jitter, jitter + 1)))
            imgs[bi, vi, 0] = img - mean_image
            thetas[bi, vi] = obj.views[m].theta
        target = perm[0]
        theta_out[bi] = obj.views[target].theta
        targets[bi] = np.asarray(obj.sils[target], dtype=np.float64)
    return imgs, thetas, theta_out, targets


def _mean_image(objects) -> np.ndarray:
    acc = None
    count = 0
    for obj in objects:
        for view in obj.views:
            img = np.asarray(view.image, dtype=np.float64)
            acc = img.copy() if acc is None else acc + img
            count += 1
    return acc / count


def train(dataset, cfg: TrainConfig, log=print) -> TrainResult:
    """Train on the dataset's train split; validate per epoch on val."""
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    mode = cfg.mode.lower()
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {cfg.mode!r}")
    train_objs = dataset.split("train")
    val_objs = dataset.split("val")
    if not train_objs or not val_objs:
        raise ValueError("dataset needs non-empty train and val splits")
    n_pool = dataset.views_per_object
    if cfg.n_views + 1 > n_pool:
        raise ValueError(
            f"n_views={cfg.n_views} needs {cfg.n_views + 1} views per object, "
            f"dataset has {n_pool}"
        )

    hp = model.Hyperparams(
        image_size=dataset.image_size,
        feature_dim=cfg.feature_dim,
        voxel_size=cfg.voxel_size,
        pooling=cfg.pooling,
        angle_dim=cfg.angle_dim,
        enc_channels=model.default_enc_channels(dataset.image_size),
    )
    rng = np.random.default_rng(cfg.seed)
    params = init_params(hp, rng)
    if cfg.init_from:
        donor = model.load_checkpoint(cfg.init_from)
        for name, t in donor.params.tensors.items():
            if name.startswith("enc."):
                if name not in params.tensors or params.tensors[name].data.shape != t.data.shape:
                    raise ValueError(f"init_from: incompatible encoder tensor {name}")
                params.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    frozen = set()
    if cfg.freeze_encoder:
        frozen = {n for n in params.tensors if n.startswith("enc.")}
        for n in frozen:
            params.tensors[n].requires_grad = False  # prunes their backward work

    mean_image = _mean_image(train_objs)

    if cfg.optimizer == "sgd":
        opt = SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    else:
        opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    log_fh = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        log_fh = open(os.path.join(cfg.out_dir, "train_log.jsonl"), "w")

    names = [name for name, _, _ in model.param_specs(hp)]
    steps_per_epoch = max(1, (len(train_objs) * n_pool) // cfg.batch_size)
    result = TrainResult(params=params, mean_image=mean_image, best_val_iou=-1.0)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            loss_sum = 0.0
            for step in range(steps_per_epoch):
                imgs, thetas, theta_out, targets = make_batch(
                    rng, train_objs, cfg.n_views, cfg.batch_size, cfg.jitter, mean_image
                )
                pred = model.predict_batch(params, imgs, thetas, theta_out, mode)
                loss = bce_loss(pred, targets)
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at epoch {epoch} step {step}"
                    )
                loss_sum += value
                backward(loss)
                opt.step(((n, params.tensors[n]) for n in names), frozen)
                for t in params.tensors.values():
                    t.grad = None
            val_iou = evaluation.evaluate(
                params, dataset, k=cfg.n_views, mode=mode, split="val",
                eval_seed=cfg.eval_seed, mean_image=mean_image,
            ).mean_iou
            entry = {
                "epoch": epoch,
                "train_loss": loss_sum / steps_per_epoch,
                "val_iou": val_iou,
                "wall_ms": int((time.monotonic() - t0) * 1000),
            }
            result.history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if log:
                log(
                    f"epoch {epoch:3d}  loss {entry['train_loss']:.4f}  "
                    f"val_iou {val_iou:.4f}  {entry['wall_ms']} ms"
                )
            if val_iou > result.best_val_iou:
                result.best_val_iou = val_iou
                if cfg.out_dir:
                    result.best_path = os.path.join(cfg.out_dir, "best.ckpt")
                    meta = {
                        "epoch": epoch,
                        "val_iou": val_iou,
                        "mode": mode,
                        "n_views": cfg.n_views,
                        "pooling": cfg.pooling,
                    }
                    model.save_checkpoint(result.best_path, params, mean_image, meta)
    finally:
        if log_fh:
            log_fh.close()
    for n in frozen:
        params.tensors[n].requires_grad = True
    return result
