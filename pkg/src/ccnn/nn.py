"""Layer primitives, loss, gradients and the optimizer step.

Built on PyTorch autograd. Tensors are NCHW inside the network; the public
codec and geometry helpers stay channels-last numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import NonFiniteError, ShapeError

CHECKPOINT_VERSION = 1
BN_EPS = 1e-5


@dataclass
class LayerSpec:
    """One row of an architecture table.

    ``pad`` is ``(left, right, top, bottom)``. ``printed_pad`` keeps the
    value printed in the source table when it differs from what is used.
    """

    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    pad: tuple = (0, 0, 0, 0)
    rate: float = 0.0
    printed_pad: tuple = None
    note: str = ""
    input_shape: tuple = None
    output_shape: tuple = None
    printed_input: tuple = None

    def output_size(self, height, width):
        if self.kind not in ("conv", "maxpool"):
            return height, width
        kh, kw = self.kernel
        sh, sw = self.stride
        left, right, top, bottom = self.pad
        return (
            (height + top + bottom - kh) // sh + 1,
            (width + left + right - kw) // sw + 1,
        )

    def as_dict(self):
        return asdict(self)


def symmetric_pad(p):
    return (p, p, p, p)


def _check_channels(x, expected, name):
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected NCHW input, got shape {tuple(x.shape)}")
    if expected and x.shape[1] != expected:
        raise ShapeError(f"{name}: expected {expected} input channels, got {x.shape[1]}")


def conv2d(x, weight, bias=None, stride=(1, 1), pad=(0, 0, 0, 0), name="conv"):
    """Cross-correlation with explicit (possibly asymmetric) zero padding."""
    _check_channels(x, weight.shape[1], name)
    left, right, top, bottom = pad
    if left == right and top == bottom:
        return F.conv2d(x, weight, bias, stride=stride, padding=(top, left))
    return F.conv2d(F.pad(x, (left, right, top, bottom)), weight, bias, stride=stride)


def relu(x):
    return F.relu(x)


def maxpool(x, kernel=(2, 2), stride=(2, 2), pad=(0, 0, 0, 0)):
    """Max pooling; padding is filled with ``-inf`` so it never wins."""
    if any(pad):
        x = F.pad(x, pad, value=-math.inf)
    return F.max_pool2d(x, kernel, stride)


def batchnorm(x, running_mean, running_var, weight, bias, training, momentum=0.1):
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, BN_EPS)


def dropout(x, rate, training):
    """Inverted dropout; the identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return F.dropout(x, rate, training)


def concat_channels(*tensors, name="concat"):
    """Stack along the channel axis after checking batch/spatial agreement."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"{name}: cannot concatenate {tuple(ref)} with {tuple(t.shape)}"
            )
    return torch.cat(tensors, dim=1)


def l2_loss(pred, target):
    """Mean squared difference over every element."""
    if pred.shape != target.shape:
        raise ShapeError(f"l2_loss: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def gradients(loss, params):
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``params``."""
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@torch.no_grad()
def sgd_step(params, grads, lr, momentum=0.9, buffers=None):
    """In-place momentum SGD: ``b <- m*b + g``, ``p <- p - lr*b``.

    ``buffers`` is a list (one per parameter) and is created when ``None``.
    Returns the buffers for the next call.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params = list(params)
    grads = list(grads)
    if buffers is None:
        buffers = [torch.zeros_like(p) for p in params]
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"gradient {i} (shape {tuple(g.shape)}) has {bad} non-finite values")
    for p, g, b in zip(params, grads, buffers):
        b.mul_(momentum).add_(g)
        p.sub_(lr * b)
    return buffers


class ConvBlock(nn.Module):
    """Conv, then batchnorm and ReLU where the architecture calls for them."""

    def __init__(self, spec, batchnorm=True, activation=True):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel, spec.stride, bias=not batchnorm
        )
        nn.init.normal_(
            self.conv.weight,
            0.0,
            math.sqrt(2.0 / (spec.in_channels * spec.kernel[0] * spec.kernel[1])),
        )
        if self.conv.bias is not None:
            nn.init.zeros_(self.conv.bias)
        self.bn = nn.BatchNorm2d(spec.out_channels, eps=BN_EPS) if batchnorm else None
        self.activation = activation

    def forward(self, x):
        x = conv2d(x, self.conv.weight, self.conv.bias, self.spec.stride, self.spec.pad, self.spec.name)
        if self.bn is not None:
            x = self.bn(x)
        if self.activation:
            x = relu(x)
        return x


class Pool(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def forward(self, x):
        return maxpool(x, self.spec.kernel, self.spec.stride, self.spec.pad)


class Dropout(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def forward(self, x):
        return dropout(x, self.spec.rate, self.training)


def save_checkpoint(path, module, **hyperparams):
    """Write parameters and buffers to ``.npz`` with a JSON metadata record.

    Layout: one array per ``state_dict`` key, plus ``__meta__`` holding
    ``{"format": "ccnn-checkpoint", "version": 1, "hyperparams": {...}}``.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = {"format": "ccnn-checkpoint", "version": CHECKPOINT_VERSION, "hyperparams": hyperparams}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(state_dict, hyperparams)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != "ccnn-checkpoint":
            raise ValueError(f"{path} is not a ccnn checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    return state, meta["hyperparams"]


def finite_difference_check(loss_fn, params, n_samples=200, step=1e-6, seed=0):
    """Compare autograd against central differences on sampled scalar entries.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    Returns a dict with the per-sample relative errors and their maximum,
    where the error is ``|g_an - g_fd| / max(|g_fd|, 1e-8)``.
    """
    params = [p for p in params if p.requires_grad]
    analytic = gradients(loss_fn(), params)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    # every tensor gets at least one probe, the rest proportional to size
    picks = [(i, int(rng.integers(p.numel()))) for i, p in enumerate(params)]
    extra = max(n_samples - len(picks), 0)
    owners = rng.choice(len(params), size=extra, p=sizes / sizes.sum())
    picks += [(int(i), int(rng.integers(sizes[i]))) for i in owners]

    errors = []
    with torch.no_grad():
        for i, j in picks:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            fd = (up - down) / (2 * step)
            an = analytic[i].reshape(-1)[j].item()
            errors.append(abs(an - fd) / max(abs(fd), 1e-8))
    errors = np.array(errors)
    return {"errors": errors, "max_rel_error": float(errors.max()), "n_samples": len(errors)}
