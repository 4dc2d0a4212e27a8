"""The cascaded localizer graph.

Two non-weight-sharing base CNNs compute feature maps ``F1`` and ``F2``
(plus the initial heatmap ``H_E`` from the second); ``K`` heatmap units
refine ``H_E -> H_1 -> ... -> H_K`` from ``F2``; ``K`` regression units map
``F1 + F2 + H_k + H_E`` and the previous unit's features to a coordinate
correction for the heatmap-decoded landmarks.

Every layer is described by a :class:`~ccnn.nn.LayerSpec` row in the layer
manifest, which is what :func:`build_manifest` returns and what the modules
are built from.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import heatmap as codec
from .exceptions import ShapeError
from .nn import ConvBlock, Dropout, LayerSpec, Pool, concat_channels, l2_loss, symmetric_pad

FULL_SIDE = 256


@dataclass
class CCNNConfig:
    K: int = 4
    input_side: int = 256
    heatmap_side: int = 64
    n_points: int = 68
    channel_scale: int = 1
    sigma: float = 1.3
    # regression losses reach BaseCNN_1 and the CRCNN only; F2 and heatmaps
    # are trained by the heatmap losses
    separate_paths: bool = True
    # divisor turning pixel residuals into regression targets: "input_side" or
    # "stride" (heatmap cells)
    residual_unit: str = "input_side"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.heatmap_side * 4 != self.input_side:
            raise ValueError("heatmap_side must be input_side / 4")
        if self.input_side % 32:
            raise ValueError("input_side must be a multiple of 32")
        if 1024 % self.channel_scale or self.channel_scale > 64:
            raise ValueError("channel_scale must divide every channel count (64..1024)")
        if self.residual_unit not in ("input_side", "stride"):
            raise ValueError("residual_unit must be 'input_side' or 'stride'")

    @property
    def stride(self):
        return self.input_side / self.heatmap_side

    @property
    def residual_scale(self):
        return float(self.input_side) if self.residual_unit == "input_side" else self.stride

    def channels(self, full_count):
        return full_count // self.channel_scale

    @property
    def feature_channels(self):
        return self.channels(128)

    @property
    def regression_channels(self):
        return self.channels(256)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def toy(cls, K=2, n_points=5):
        return cls(K=K, input_side=64, heatmap_side=16, n_points=n_points, channel_scale=8)


# (name, kind, kernel, stride, printed pad, full-size out-channels, printed input HxWxC)
# out-channels: int, "N" for landmark count, "2N" for the coordinate vector.
_BASE_TABLE = [
    ("A1-Conv", "conv", 3, 1, 2, 64, (256, 256, 3)),
    ("A2-Conv", "conv", 3, 1, 2, 64, (256, 256, 64)),
    ("A2-Pool", "maxpool", 2, 2, 0, None, (256, 256, 64)),
    ("A3-Conv", "conv", 3, 1, 2, 64, (128, 128, 64)),
    ("A4-Conv", "conv", 3, 1, 2, 128, (128, 128, 64)),
    ("A4-Pool", "maxpool", 2, 2, 0, None, (128, 128, 128)),
    ("A5-Conv", "conv", 3, 1, 2, 128, (64, 64, 128)),
    ("A6-Conv", "conv", 3, 1, 2, 128, (64, 64, 128)),
    ("A7-Conv", "conv", 1, 1, None, 128, (64, 64, 128)),
]
_BASE_HEAD_TABLE = [
    ("A8-Conv", "conv", 9, 1, 8, 128, (64, 64, 128)),
    ("A9-Conv", "conv", 9, 1, 8, 128, (64, 64, 128)),
    ("A10-Conv", "conv", 1, 1, 0, 256, (64, 64, 128)),
    ("A11-Conv", "conv", 1, 1, 0, 256, (64, 64, 256)),
    ("A11-Dropout0.5", "dropout", 1, 1, None, None, (64, 64, 256)),
    ("A12-Conv", "conv", 1, 1, 0, "N", (64, 64, 256)),
]
_HMSU_TABLE = [
    ("B1-Conv", "conv", 7, 1, 6, 64, (64, 64, 136)),
    ("B2-Conv", "conv", 13, 1, 12, 64, (64, 64, 64)),
    ("B3-Conv", "conv", 1, 1, 0, 128, (64, 64, 64)),
    ("B4-Conv", "conv", 1, 1, 0, "N", (64, 64, 128)),
]
_CRCNN_FEATURE_TABLE = [
    ("C1-Conv", "conv", 7, 2, 5, 64, (64, 64, 332)),
    ("C1-Pool", "maxpool", 2, 1, 1, None, (32, 32, 64)),
    ("C2-Conv", "conv", 5, 2, 3, 128, (32, 32, 64)),
    ("C2-Pool", "maxpool", 2, 1, 1, None, (16, 16, 128)),
    ("C3-Conv", "conv", 3, 2, 1, 256, (16, 16, 128)),
    ("C3-Pool", "maxpool", 2, 1, 1, None, (8, 8, 256)),
]
_CRCNN_HEAD_TABLE = [
    ("C4-Conv", "conv", 3, 2, 1, 512, (8, 8, 512)),
    ("C4-Pool", "maxpool", 2, 1, 1, None, (4, 4, 512)),
    ("C5-Conv", "conv", 3, 2, 1, 1024, (4, 4, 512)),
    ("C5-Pool", "maxpool", 2, 1, 1, None, (2, 2, 1024)),
    ("C6-Conv", "conv", 1, 1, 0, "2N", (2, 2, 1024)),
]

# Layers that end a branch: no batchnorm and a linear output. The tables print
# a ReLU after A12/B4, but a rectified heatmap head that goes all-negative
# never recovers; the linear head trains the same targets without that trap.
_OUTPUT_LAYERS = {"A12-Conv": False, "B4-Conv": False, "C6-Conv": False}
_NO_RELU = {"A7-Conv"}


def _conv_pad(kind, kernel, stride, in_side, out_side, printed):
    """Padding that reproduces the table's spatial sizes.

    Stride-1 convs keep the size, so they get ``kernel // 2``; strided convs
    get the smallest symmetric pad that lands on the printed output size;
    stride-1 2x2 pools pad one cell on the right/bottom.
    """
    if kind == "maxpool":
        if stride == 1:
            return (0, kernel - 1, 0, kernel - 1)
        return symmetric_pad(0)
    if stride == 1:
        return symmetric_pad(kernel // 2)
    for p in range(kernel):
        if (in_side + 2 * p - kernel) // stride + 1 == out_side:
            return symmetric_pad(p)
    raise ShapeError(f"no padding maps {in_side} to {out_side} with k={kernel}, s={stride}")


def _build_rows(table, config, in_channels, side):
    rows = []
    n = config.n_points
    for name, kind, k, s, printed, out, printed_in in table:
        out_side = max(1, side // s) if kind == "conv" else side
        if kind == "conv":
            if out == "N":
                out_ch = n
            elif out == "2N":
                out_ch = 2 * n
            else:
                out_ch = config.channels(out)
        else:
            out_ch = in_channels
        pad = _conv_pad(kind, k, s, side, out_side, printed)
        kernel = (k, k)
        note = ""
        if name == "C6-Conv":
            # full-extent kernel: collapses the remaining map to 1 x 1
            kernel = (side, side)
            pad = symmetric_pad(0)
            note = "1x1 printed; kernel spans the whole remaining map to reach a 1x1 output"
        if name == "B1-Conv":
            note = "input is F2 + H_(k-1); printed channel count 136 = 2N"
        if name == "C1-Conv":
            note = "input is F1 + F2 + H_k + H_E; printed channel count 332"
        printed_pad = None if printed is None else symmetric_pad(printed)
        rows.append(
            LayerSpec(
                name=name,
                kind=kind,
                in_channels=in_channels,
                out_channels=out_ch,
                kernel=kernel,
                stride=(s, s),
                pad=pad,
                rate=0.5 if kind == "dropout" else 0.0,
                printed_pad=printed_pad if printed_pad != pad else None,
                note=note,
                input_shape=(side, side, in_channels),
                printed_input=printed_in,
            )
        )
        side = rows[-1].output_size(side, side)[0]
        in_channels = out_ch
        rows[-1].output_shape = (side, side, in_channels)
    return rows


def build_manifest(config):
    """Layer rows grouped by unit type, at the configuration's scale."""
    f = config.feature_channels
    n = config.n_points
    s = config.heatmap_side
    base = _build_rows(_BASE_TABLE, config, 3, config.input_side)
    head = _build_rows(_BASE_HEAD_TABLE, config, f, s)
    hmsu = _build_rows(_HMSU_TABLE, config, f + n, s)
    feat = _build_rows(_CRCNN_FEATURE_TABLE, config, 2 * f + 2 * n, s)
    e_side, _, e_ch = feat[-1].output_shape
    regr = _build_rows(_CRCNN_HEAD_TABLE, config, 2 * e_ch, e_side)
    return {"base": base, "base_head": head, "hmsu": hmsu, "crcnn_features": feat, "crcnn_head": regr}


def manifest_records(config):
    records = []
    for unit, rows in build_manifest(config).items():
        for r in rows:
            records.append({"unit": unit, **r.as_dict()})
    return records


def format_manifest(config):
    """Human-readable layer manifest table."""
    lines = [
        f"# CCNN layer manifest: K={config.K} input={config.input_side} "
        f"N={config.n_points} channel_scale={config.channel_scale}",
        f"{'unit':<15} {'layer':<15} {'kind':<8} {'kernel':<7} {'stride':<6} "
        f"{'pad(l,r,t,b)':<13} {'input':<15} {'output':<15} {'table input':<15} notes",
    ]
    fmt = lambda t: "x".join(str(v) for v in t)
    for rec in manifest_records(config):
        notes = []
        if rec["printed_pad"] is not None:
            notes.append(f"printed pad {fmt(rec['printed_pad'][:2])}")
        if rec["note"]:
            notes.append(rec["note"])
        lines.append(
            f"{rec['unit']:<15} {rec['name']:<15} {rec['kind']:<8} {fmt(rec['kernel']):<7} "
            f"{fmt(rec['stride']):<6} {','.join(map(str, rec['pad'])):<13} "
            f"{fmt(rec['input_shape']):<15} {fmt(rec['output_shape']):<15} "
            f"{fmt(rec['printed_input']):<15} {'; '.join(notes)}"
        )
    return "\n".join(lines) + "\n"


def _make_layers(rows):
    layers = []
    for r in rows:
        if r.kind == "conv":
            is_out = r.name in _OUTPUT_LAYERS
            act = _OUTPUT_LAYERS[r.name] if is_out else r.name not in _NO_RELU
            layers.append(ConvBlock(r, batchnorm=not is_out, activation=act))
        elif r.kind == "maxpool":
            layers.append(Pool(r))
        elif r.kind == "dropout":
            layers.append(Dropout(r))
    return nn.Sequential(*layers)


class BaseCNN(nn.Module):
    """Feature trunk (A1-A7) with an optional heatmap head (A8-A12)."""

    def __init__(self, manifest, with_head=True):
        super().__init__()
        self.trunk = _make_layers(manifest["base"])
        self.head = _make_layers(manifest["base_head"]) if with_head else None

    def forward(self, image):
        feats = self.trunk(image)
        return feats, (self.head(feats) if self.head is not None else None)


class HeatmapUnit(nn.Module):
    def __init__(self, manifest):
        super().__init__()
        self.layers = _make_layers(manifest["hmsu"])

    def forward(self, f2, h_prev):
        return self.layers(concat_channels(f2, h_prev, name="hmsu input"))


class RegressionUnit(nn.Module):
    def __init__(self, manifest):
        super().__init__()
        self.features = _make_layers(manifest["crcnn_features"])
        self.head = _make_layers(manifest["crcnn_head"])

    def forward(self, f1, f2, h_k, h_e, e_prev):
        e_k = self.features(concat_channels(f1, f2, h_k, h_e, name="crcnn input"))
        if e_prev is None:
            e_prev = torch.zeros_like(e_k)
        delta = self.head(concat_channels(e_k, e_prev, name="crcnn head input"))
        return e_k, delta.flatten(1)


@dataclass
class ForwardTrace:
    F1: torch.Tensor
    F2: torch.Tensor
    H_E: torch.Tensor
    H: list = field(default_factory=list)
    E: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    P_hat: list = field(default_factory=list)
    landmarks: torch.Tensor = None


def decode_heatmaps(h, stride):
    """Batched first-argmax decoding of NCHW heatmaps to ``(n, N, 2)`` pixels."""
    n, c, rows, cols = h.shape
    idx = torch.argmax(h.detach().reshape(n, c, rows * cols), dim=-1)
    v = torch.div(idx, cols, rounding_mode="floor")
    u = idx - v * cols
    return torch.stack([(u + 0.5) * stride, (v + 0.5) * stride], dim=-1).to(h.dtype)


def base_forward(image, base):
    return base(image)


def hmsu_forward(f2, h_prev, unit):
    return unit(f2, h_prev)


def crcnn_forward(f1, f2, h_k, h_e, e_prev, unit):
    return unit(f1, f2, h_k, h_e, e_prev)


class CCNN(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or CCNNConfig()
        manifest = build_manifest(self.config)
        self.manifest = manifest
        # BaseCNN_1 only feeds the regression cascade, so it carries no heatmap head.
        self.base1 = BaseCNN(manifest, with_head=False)
        self.base2 = BaseCNN(manifest, with_head=True)
        self.hmsu = nn.ModuleList(HeatmapUnit(manifest) for _ in range(self.config.K))
        self.crcnn = nn.ModuleList(RegressionUnit(manifest) for _ in range(self.config.K))

    def forward(self, image):
        cfg = self.config
        expected = (3, cfg.input_side, cfg.input_side)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise ShapeError(f"input: expected (n, {expected}), got {tuple(image.shape)}")
        f1, _ = base_forward(image, self.base1)
        f2, h_e = base_forward(image, self.base2)
        trace = ForwardTrace(f1, f2, h_e)
        h_prev, e_prev = h_e, None
        for hm_unit, reg_unit in zip(self.hmsu, self.crcnn):
            h_k = hmsu_forward(f2, h_prev, hm_unit)
            if cfg.separate_paths:
                e_k, delta = crcnn_forward(f1, f2.detach(), h_k.detach(), h_e.detach(), e_prev, reg_unit)
            else:
                e_k, delta = crcnn_forward(f1, f2, h_k, h_e, e_prev, reg_unit)
            trace.H.append(h_k)
            trace.E.append(e_k)
            trace.delta.append(delta)
            trace.P_hat.append(decode_heatmaps(h_k, cfg.stride))
            h_prev, e_prev = h_k, e_k
        final = trace.P_hat[-1] + trace.delta[-1].reshape(-1, cfg.n_points, 2) * cfg.residual_scale
        trace.landmarks = final
        return trace

    def unit_parameters(self):
        """Named parameter groups, one per independently parameterized unit."""
        groups = {"base1": list(self.base1.parameters()), "base2": list(self.base2.parameters())}
        for k in range(self.config.K):
            groups[f"hmsu{k + 1}"] = list(self.hmsu[k].parameters())
            groups[f"crcnn{k + 1}"] = list(self.crcnn[k].parameters())
        return groups


def heatmap_targets(gt, config, dtype=torch.float32):
    """Encode ``(n, N, 2)`` pixel landmarks into NCHW Gaussian targets."""
    pts = gt.detach().cpu().numpy() if isinstance(gt, torch.Tensor) else np.asarray(gt)
    grid = codec.encode(pts, config.heatmap_side, config.sigma, config.stride).grid
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(grid, -1, -3))).to(dtype)


def total_loss(trace, gt, config, targets=None, estimates=None):
    """Sum of the base heatmap, cascade heatmap and cascade regression L2 terms.

    Regression targets are ``residual(gt, P_hat_k) / config.residual_scale``.
    ``estimates`` overrides ``trace.P_hat`` (finite-difference checks hold them
    fixed so argmax flips cannot make the loss discontinuous).

    Returns ``(total, breakdown)`` with breakdown keys ``base``,
    ``heatmap`` (list of K) and ``reg`` (list of K), as floats.
    """
    dtype = trace.H_E.dtype
    gt = torch.as_tensor(gt, dtype=dtype)
    if targets is None:
        targets = heatmap_targets(gt, config, dtype)
    estimates = trace.P_hat if estimates is None else estimates
    base = l2_loss(trace.H_E, targets)
    hm_terms = [l2_loss(h, targets) for h in trace.H]
    reg_terms = []
    for delta, p_hat in zip(trace.delta, estimates):
        target = (gt - p_hat).reshape(gt.shape[0], -1) / config.residual_scale
        reg_terms.append(l2_loss(delta, target))
    total = base + sum(hm_terms) + sum(reg_terms)
    breakdown = {
        "base": base.item(),
        "heatmap": [t.item() for t in hm_terms],
        "reg": [t.item() for t in reg_terms],
    }
    return total, breakdown


def shape_audit(model, image=None):
    """Run one forward pass and record every layer's actual input/output shape.

    Returns a list of dicts ``{unit, name, expected_in, actual_in,
    expected_out, actual_out}`` with shapes as ``(H, W, C)``.
    """
    cfg = model.config
    records = []
    hooks = []

    def hook(layer_spec, unit_name):
        def fn(module, inputs, output):
            hwc = lambda t: (t.shape[2], t.shape[3], t.shape[1])
            records.append(
                {
                    "unit": unit_name,
                    "name": layer_spec.name,
                    "expected_in": tuple(layer_spec.input_shape),
                    "actual_in": hwc(inputs[0]),
                    "expected_out": tuple(layer_spec.output_shape),
                    "actual_out": hwc(output),
                }
            )
        return fn

    def attach(seq, unit_name):
        for layer in seq:
            hooks.append(layer.register_forward_hook(hook(layer.spec, unit_name)))

    attach(model.base1.trunk, "base1")
    attach(model.base2.trunk, "base2")
    attach(model.base2.head, "base2_head")
    for k in range(cfg.K):
        attach(model.hmsu[k].layers, f"hmsu{k + 1}")
        attach(model.crcnn[k].features, f"crcnn{k + 1}_features")
        attach(model.crcnn[k].head, f"crcnn{k + 1}_head")
    if image is None:
        image = torch.zeros(1, 3, cfg.input_side, cfg.input_side)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            trace = model(image)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return records, trace


def manifest_json(config):
    return json.dumps(manifest_records(config), indent=1)
