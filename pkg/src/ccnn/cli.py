"""Command-line entry point: ``ccnn {train,eval,ablate,synth,encode-demo}``.

Settings come from a JSON config file (``--config``) whose sections are
``model``, ``train``, ``data``, ``eval`` and ``ablate``; flags override the
matching keys. Every artifact is written under ``--out``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (a traceback is
left in ``<out>/diagnostics.txt``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import cv2
import numpy as np
import torch

from . import heatmap as codec
from .data import (SyntheticSpec, generate_synthetic, load_dataset, read_pts, to_arrays,
                   write_dataset)
from .geometry import default_convention
from .metrics import EvalReport, nle_batch, report_table
from .model import CCNNConfig, format_manifest
from .training import TrainConfig, load_model, predict, train

logger = logging.getLogger("ccnn")

DEFAULTS = {
    "model": CCNNConfig.toy().to_dict(),
    "train": {"epochs": 200},
    "data": {"synthetic": {}, "train_count": 500, "test_count": 100,
             "train_seed": 1, "test_seed": 2},
    "eval": {"mode": "inter_ocular", "alpha": 0.08},
    "ablate": {"K": [1, 2, 3, 4], "seeds": [0, 1, 2]},
}


class UsageError(Exception):
    pass


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, args):
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {path} does not exist")
        cfg = _merge(cfg, json.loads(p.read_text()))
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "k", None):
        ks = [int(v) for v in str(args.k).split(",")]
        cfg["ablate"]["K"] = ks
        cfg["model"]["K"] = ks[0]
    if getattr(args, "mode", None):
        cfg["eval"]["mode"] = args.mode
    if getattr(args, "alpha", None) is not None:
        cfg["eval"]["alpha"] = args.alpha
    return cfg


def _model_config(cfg, **kw):
    return CCNNConfig(**{**cfg["model"], **kw})


def _datasets(cfg, side):
    """``(Xtr, Ytr), (Xte, Yte)`` from real directories or the synthetic generator."""
    data = cfg["data"]
    if data.get("root"):
        train_s = load_dataset(data["root"], cfg["model"].get("n_points"))
        test_s = load_dataset(data["test_root"], cfg["model"].get("n_points")) if data.get("test_root") else []
        tr = to_arrays(train_s, side)
        te = to_arrays(test_s, side) if test_s else (tr[0][:0], tr[1][:0])
        return tr, te
    spec = SyntheticSpec(**{"n_points": cfg["model"]["n_points"], "side": side, **data.get("synthetic", {})})
    tr = to_arrays(generate_synthetic(spec, data["train_count"], data["train_seed"]), side)
    te = to_arrays(generate_synthetic(spec, data["test_count"], data["test_seed"]), side)
    return tr, te


def _write_eval(report, out, label):
    report.to_json(out / "report.json")
    report.write_ced_csv(out / "ced.csv")
    (out / "table.txt").write_text(report_table(report, label))


def cmd_train(cfg, out):
    mcfg = _model_config(cfg)
    (Xtr, Ytr), (Xte, Yte) = _datasets(cfg, mcfg.input_side)
    tcfg = TrainConfig(**cfg["train"])
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    (out / "manifest.txt").write_text(format_manifest(mcfg))
    result = train(Xtr, Ytr, mcfg, tcfg, out_dir=out)
    if len(Xte):
        conv = default_convention(mcfg.n_points)
        errors = nle_batch(predict(result.model, Xte), Yte, cfg["eval"]["mode"], conv)
        _write_eval(EvalReport.from_errors(errors, cfg["eval"]["mode"], cfg["eval"]["alpha"]), out,
                    "desk-scale")
    return 0


def _read_pts_dir(root):
    root = Path(root)
    files = sorted(root.glob("*.pts"))
    if not files:
        raise UsageError(f"no .pts files in {root}")
    return {f.name: read_pts(f) for f in files}


def cmd_eval(cfg, out, args):
    mode, alpha = cfg["eval"]["mode"], cfg["eval"]["alpha"]
    if args.pred and args.gt:
        pred, gt = _read_pts_dir(args.pred), _read_pts_dir(args.gt)
        names = sorted(set(pred) & set(gt))
        if not names:
            raise UsageError("prediction and ground-truth directories share no .pts names")
        est = np.stack([pred[n] for n in names])
        ref = np.stack([gt[n] for n in names])
    elif args.checkpoint:
        model = load_model(args.checkpoint)
        (_, _), (Xte, ref) = _datasets({**cfg, "model": model.config.to_dict()}, model.config.input_side)
        est = predict(model, Xte)
    else:
        raise UsageError("eval needs --pred and --gt, or --checkpoint")
    conv = default_convention(ref.shape[1])
    report = EvalReport.from_errors(nle_batch(est, ref, mode, conv), mode, alpha)
    _write_eval(report, out, "evaluated")
    return 0


def cmd_ablate(cfg, out):
    ks, seeds = cfg["ablate"]["K"], cfg["ablate"]["seeds"]
    base = _model_config(cfg)
    (Xtr, Ytr), (Xte, Yte) = _datasets(cfg, base.input_side)
    conv = default_convention(base.n_points)
    rows = []
    for k in ks:
        errs = []
        for seed in seeds:
            tcfg = TrainConfig(**{**cfg["train"], "seed": seed})
            result = train(Xtr, Ytr, _model_config(cfg, K=k), tcfg)
            errs.append(float(nle_batch(predict(result.model, Xte), Yte, cfg["eval"]["mode"], conv).mean()))
            logger.info("K=%d seed=%d test NLE %.4f", k, seed, errs[-1])
        rows.append([k, float(np.mean(errs)), float(np.std(errs))] + errs)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "mean_nle", "std_nle"] + [f"nle_seed_{s}" for s in seeds])
        for r in rows:
            w.writerow([r[0]] + [f"{v:.10g}" for v in r[1:]])
    return 0


def cmd_synth(cfg, out):
    side = cfg["model"]["input_side"]
    spec = SyntheticSpec(**{"n_points": cfg["model"]["n_points"], "side": side,
                            "seed": cfg["train"].get("seed", 0), **cfg["data"].get("synthetic", {})})
    samples = generate_synthetic(spec, cfg["data"]["train_count"])
    write_dataset(samples, out / "images")
    spec.to_file(out / "synthetic_spec.json")
    return 0


def _heatmap_grid(image, heatmaps, cell=96):
    """Input image followed by one tile per heatmap channel."""
    tiles = [cv2.resize(((image + 0.5) * 255).clip(0, 255).astype(np.uint8), (cell, cell),
                        interpolation=cv2.INTER_NEAREST)]
    for c in range(heatmaps.shape[-1]):
        h = heatmaps[..., c]
        h = (h - h.min()) / max(h.max() - h.min(), 1e-12)
        gray = cv2.resize((h * 255).astype(np.uint8), (cell, cell), interpolation=cv2.INTER_NEAREST)
        tiles.append(cv2.cvtColor(cv2.applyColorMap(gray, cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB))
    return np.concatenate(tiles, axis=1)


def cmd_encode_demo(cfg, out, args):
    mcfg = _model_config(cfg)
    spec = SyntheticSpec(**{"n_points": mcfg.n_points, "side": mcfg.input_side,
                            "seed": cfg["train"].get("seed", 0), **cfg["data"].get("synthetic", {})})
    sample = generate_synthetic(spec, 1)[0]
    (X, Y) = to_arrays([sample], mcfg.input_side)
    target = codec.encode(Y[0], mcfg.heatmap_side, mcfg.sigma, mcfg.stride).grid
    rows = [_heatmap_grid(X[0], target)]
    if args.checkpoint:
        model = load_model(args.checkpoint)
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            trace = model(torch.from_numpy(np.moveaxis(X, -1, 1).copy()).to(dtype))
        for h in [trace.H_E] + trace.H:
            rows.append(_heatmap_grid(X[0], np.moveaxis(h[0].double().numpy(), 0, -1)))
    grid = np.concatenate(rows, axis=0)
    cv2.imwrite(str(out / "heatmaps.png"), cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
    np.save(out / "target_heatmaps.npy", target)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ccnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ablate", "synth", "encode-demo"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", help="cascade count; comma-separated list for ablate")
        p.add_argument("--mode", choices=["inter_ocular", "inter_pupil"])
        p.add_argument("--alpha", type=float)
        if name in ("eval", "encode-demo"):
            p.add_argument("--checkpoint", help="checkpoint .npz written by train")
        if name == "eval":
            p.add_argument("--pred", help="directory of predicted .pts files")
            p.add_argument("--gt", help="directory of ground-truth .pts files")
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args)
    except (UsageError, ValueError) as exc:
        print(f"ccnn: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    try:
        torch.manual_seed(cfg["train"].get("seed", 0))
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        return cmd_encode_demo(cfg, out, args)
    except UsageError as exc:
        print(f"ccnn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure
        (out / "diagnostics.txt").write_text(traceback.format_exc())
        print(f"ccnn: {args.command} failed: {exc} (see {out / 'diagnostics.txt'})", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
