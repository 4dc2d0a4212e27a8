"""Training loop: lr schedule, augmentation, validation and checkpointing."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
import torch

from . import nn as ccnn_nn
from .exceptions import EmptyDatasetError, NonFiniteError
from .geometry import check_inside, default_convention
from .metrics import nle_batch
from .model import CCNN, CCNNConfig, heatmap_targets, total_loss

logger = logging.getLogger(__name__)

# 1e-5 for epochs 1-30, 5e-6 for 31-35, 1e-6 afterwards (epochs are 1-based).
REFERENCE_SCHEDULE = ((1, 1e-5), (31, 5e-6), (36, 1e-6))
REFERENCE_EPOCHS = 2500
DESK_SCHEDULE = ((1, 0.2), (121, 0.05), (171, 0.01))


@dataclass
class AugmentConfig:
    rotation: float = 15.0
    scale: tuple = (0.9, 1.1)
    translation: float = 0.05
    color: tuple = (0.8, 1.2)

    @classmethod
    def none(cls):
        return cls(rotation=0.0, scale=(1.0, 1.0), translation=0.0, color=(1.0, 1.0))


@dataclass
class TrainConfig:
    epochs: int = 200
    lr_schedule: tuple = DESK_SCHEDULE
    batch_size: int = 16
    momentum: float = 0.9
    augmentation: AugmentConfig = field(default_factory=AugmentConfig.none)
    augment: bool = False
    seed: int = 0
    validation_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        self.lr_schedule = tuple(tuple(s) for s in self.lr_schedule)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**self.augmentation)
        starts = [s for s, _ in self.lr_schedule]
        rates = [r for _, r in self.lr_schedule]
        if not self.lr_schedule or starts[0] != 1 or starts != sorted(set(starts)):
            raise ValueError("lr_schedule must start at epoch 1 with increasing epochs")
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")

    @classmethod
    def reference(cls, **kw):
        return cls(epochs=REFERENCE_EPOCHS, lr_schedule=REFERENCE_SCHEDULE, augment=True,
                   augmentation=AugmentConfig(), **kw)

    def to_dict(self):
        return asdict(self)


def learning_rate(schedule, epoch):
    """Step-function lr for a 1-based ``epoch``."""
    lr = None
    for start, rate in schedule:
        if epoch >= start:
            lr = rate
    if lr is None:
        raise ValueError(f"epoch {epoch} precedes the schedule")
    return lr


def augment(image, landmarks, config, rng):
    """Random rotation/scale/translation about the image center plus color gain.

    ``image`` is ``(H, W, 3)`` normalized to ``[-0.5, 0.5]``. Returns
    ``(image, landmarks, outside)`` where ``outside`` flags landmarks that left
    the frame (they are clamped to its border).
    """
    h, w = image.shape[:2]
    theta = math.radians(rng.uniform(-config.rotation, config.rotation)) if config.rotation else 0.0
    s = rng.uniform(*config.scale) if config.scale[0] != config.scale[1] else config.scale[0]
    t = rng.uniform(-config.translation, config.translation, 2) * (w, h) if config.translation else np.zeros(2)
    gain = rng.uniform(*config.color, 3) if config.color[0] != config.color[1] else np.full(3, config.color[0])

    c = np.array([w / 2.0, h / 2.0])
    a = s * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    offset = c + t - a @ c
    pts = np.asarray(landmarks, dtype=np.float64) @ a.T + offset

    out = image
    if theta or s != 1.0 or np.any(t):
        # continuous -> pixel-index convention: p_idx = p - 0.5
        m = np.hstack([a, (offset + a @ np.full(2, 0.5) - 0.5)[:, None]])
        out = cv2.warpAffine(
            np.ascontiguousarray(image, dtype=np.float64), m, (w, h), flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT, borderValue=(-0.5, -0.5, -0.5),
        )
    if np.any(gain != 1.0):
        out = np.clip((out + 0.5) * gain - 0.5, -0.5, 0.5)

    outside = ~check_inside(pts, (w, h))
    if outside.any():
        pts = np.clip(pts, 0.0, np.nextafter([w, h], 0))
    return out, pts, outside


def _to_tensor(images, dtype):
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(images, -1, 1))).to(dtype)
    return x.contiguous(memory_format=torch.channels_last)


def predict(model, images, batch_size=64):
    """Final landmark estimates for ``(n, H, W, 3)`` normalized images."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(_to_tensor(images[i:i + batch_size], dtype)).landmarks.double().numpy())
    model.train(was_training)
    return np.concatenate(out)


def split_indices(n, fraction, rng):
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    if n_val and n_val == n:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


CSV_FLOAT = "{:.10g}"


def _csv_columns(K):
    return (["epoch", "lr", "loss_total"] + [f"loss_heatmap_{k}" for k in range(1, K + 1)]
            + [f"loss_reg_{k}" for k in range(1, K + 1)] + ["val_nle"])


@dataclass
class TrainResult:
    model: CCNN
    log: list
    best_epoch: int
    best_val_nle: float


def train(images, landmarks, model_config=None, train_config=None, out_dir=None,
          convention=None, model=None):
    """Train a CCNN on normalized images and pixel landmarks.

    Returns a :class:`TrainResult` whose model carries the parameters with the
    best validation NLE (the last epoch's when there is no validation split).
    With ``out_dir`` set, ``metrics.csv`` and ``best.npz``/``last.npz``
    checkpoints are written there.
    """
    model_config = model_config or CCNNConfig.toy()
    cfg = train_config or TrainConfig()
    images = np.asarray(images)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDatasetError("training set is empty")
    if len(images) != len(landmarks):
        raise ValueError("images and landmarks disagree in length")
    convention = convention or default_convention(model_config.n_points)
    dtype = getattr(torch, cfg.dtype)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = CCNN(model_config)
    model = model.to(dtype=dtype, memory_format=torch.channels_last)
    train_idx, val_idx = split_indices(len(images), cfg.validation_fraction, rng)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(_csv_columns(model_config.K))
    else:
        csv_file = writer = None

    params = [p for p in model.parameters()]
    buffers = None
    best_state = copy.deepcopy(model.state_dict())
    best_val, best_epoch = math.inf, 0
    log = []
    seeds = np.random.SeedSequence(cfg.seed)
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = learning_rate(cfg.lr_schedule, epoch)
            model.train()
            order = rng.permutation(train_idx)
            epoch_seed = seeds.spawn(1)[0]
            sample_seeds = epoch_seed.generate_state(len(images))
            sums = None
            count = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batchnorm needs more than one sample
                x, y = images[idx], landmarks[idx]
                if cfg.augment:
                    x, y = _augment_batch(x, y, cfg.augmentation, sample_seeds[idx])
                xt = _to_tensor(x, dtype)
                yt = torch.from_numpy(y).to(dtype)
                trace = model(xt)
                loss, parts = total_loss(trace, yt, model_config,
                                         targets=heatmap_targets(y, model_config, dtype))
                if not torch.isfinite(loss):
                    raise NonFiniteError(f"loss became {loss.item()} at epoch {epoch}")
                grads = ccnn_nn.gradients(loss, params)
                buffers = ccnn_nn.sgd_step(params, grads, lr, cfg.momentum, buffers)
                row = [loss.item()] + parts["heatmap"] + parts["reg"]
                sums = np.array(row) * len(idx) if sums is None else sums + np.array(row) * len(idx)
                count += len(idx)
            means = sums / count if count else np.full(1 + 2 * model_config.K, np.nan)

            val_nle = math.nan
            if len(val_idx):
                pred = predict(model, images[val_idx])
                val_nle = float(nle_batch(pred, landmarks[val_idx], convention=convention).mean())
            entry = {"epoch": epoch, "lr": lr, "loss_total": float(means[0]),
                     "loss_heatmap": [float(v) for v in means[1:1 + model_config.K]],
                     "loss_reg": [float(v) for v in means[1 + model_config.K:]],
                     "val_nle": val_nle}
            log.append(entry)
            if writer is not None:
                writer.writerow([epoch, CSV_FLOAT.format(lr)] + [CSV_FLOAT.format(v) for v in means]
                                + [CSV_FLOAT.format(val_nle)])
                csv_file.flush()
            improved = val_nle < best_val if len(val_idx) else True
            if improved:
                best_val, best_epoch = val_nle, epoch
                best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    ccnn_nn.save_checkpoint(os.path.join(out_dir, "best.npz"), model,
                                            epoch=epoch, val_nle=val_nle, **model_config.to_dict())
            logger.info("epoch %d lr %.3g loss %.5g val_nle %.4f", epoch, lr, means[0], val_nle)
    except NonFiniteError:
        logger.error("aborting: non-finite loss or gradient; best checkpoint kept")
        raise
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None and cfg.epochs:
        ccnn_nn.save_checkpoint(os.path.join(out_dir, "last.npz"), model,
                                epoch=cfg.epochs, **model_config.to_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_epoch, best_val)


def _augment_batch(images, landmarks, config, seeds):
    xs, ys = [], []
    for img, pts, s in zip(images, landmarks, seeds):
        x, y, _ = augment(img, pts, config, np.random.default_rng(int(s)))
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def load_model(path):
    """Rebuild a CCNN from a checkpoint written during training."""
    state, hyper = ccnn_nn.load_checkpoint(path)
    fields = CCNNConfig.__dataclass_fields__
    config = CCNNConfig(**{k: v for k, v in hyper.items() if k in fields})
    model = CCNN(config)
    model.load_state_dict(state)
    model.eval()
    return model


def mean_shape_nle(train_landmarks, test_landmarks, convention):
    """NLE of predicting the training mean shape for every test image."""
    mean = np.asarray(train_landmarks).mean(axis=0)
    return float(nle_batch(np.broadcast_to(mean, np.shape(test_landmarks)), test_landmarks,
                           convention=convention).mean())
