"""Localization error metrics: NLE, CED, AUC and failure rate, plus reporting."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DegenerateAnnotationError
from .geometry import IBUG68, as_points, normalization_distance

DEFAULT_ALPHA = 0.08
FAILURE_THRESHOLD = 0.08

# Published CCNN results (NLE and AUC in percent), reproduced as
# documentation targets next to desk-scale numbers.
REFERENCE_RESULTS = {
    "300w_public": {
        "inter_pupil": {"Common set": 4.55, "Challenging set": 5.67, "Full Set": 4.85},
        "inter_ocular": {"Common set": 3.23, "Challenging set": 3.99, "Full Set": 3.44},
    },
    "300w_private": {
        "inter_pupil": {"LFPW": 4.63, "Helen": 4.51, "300-W Private Set": 4.74},
        "inter_ocular": {"LFPW": 3.30, "Helen": 3.20, "300-W Private Set": 3.33},
    },
    "auc": {
        "300-W Public": {"auc": 57.88, "failure": 0.58},
        "300-W Private": {"auc": 58.67, "failure": 0.83},
    },
}


def nle(est, gt, mode="inter_ocular", convention=IBUG68):
    """Mean point-to-point error divided by the ground truth's eye distance."""
    p_hat, p = as_points(est), as_points(gt)
    if p_hat.shape != p.shape:
        raise ValueError(f"landmark counts differ: {p_hat.shape} vs {p.shape}")
    d = normalization_distance(p, mode, convention)
    if not d > 0:
        raise DegenerateAnnotationError("normalization distance is zero")
    return float(np.linalg.norm(p_hat - p, axis=1).sum() / (len(p) * d))


def nle_batch(est, gt, mode="inter_ocular", convention=IBUG68):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return np.array([nle(e, g, mode, convention) for e, g in zip(est, gt)])


def _errors(per_image_nle):
    e = np.asarray(per_image_nle, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("need at least one error value")
    return e


def ced(per_image_nle, grid=None):
    """Empirical CDF of the errors, ``F(t) = #{e <= t} / n``, on ``grid``.

    Without a grid the curve is returned at its breakpoints: the sorted
    distinct errors and the fraction at or below each.
    """
    e = np.sort(_errors(per_image_nle))
    if grid is None:
        ts, counts = np.unique(e, return_counts=True)
        return ts, np.cumsum(counts) / e.size
    grid = np.asarray(grid, dtype=np.float64)
    return grid, np.searchsorted(e, grid, side="right") / e.size


def auc_alpha(per_image_nle, alpha=DEFAULT_ALPHA):
    """Area under the step CED on ``[0, alpha]``, normalized by ``alpha``, in percent.

    Each error ``e`` contributes ``max(alpha - e, 0)`` to the integral.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    e = _errors(per_image_nle)
    return float(100.0 * np.mean(np.clip(alpha - e, 0.0, None)) / alpha)


def failure_rate(per_image_nle, threshold=FAILURE_THRESHOLD):
    """Percentage of images whose error is strictly above ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = _errors(per_image_nle)
    return float(100.0 * np.mean(e > threshold))


@dataclass
class EvalReport:
    per_image_nle: list
    mode: str = "inter_ocular"
    alpha: float = DEFAULT_ALPHA
    auc_alpha: float = 0.0
    failure_rate: float = 0.0
    mean_nle: float = 0.0
    ced: list = field(default_factory=list)

    @classmethod
    def from_errors(cls, errors, mode="inter_ocular", alpha=DEFAULT_ALPHA,
                    threshold=FAILURE_THRESHOLD, grid=None):
        e = _errors(errors)
        if grid is None:
            grid = np.linspace(0.0, max(alpha, float(e.max())), 201)
        ts, frac = ced(e, grid)
        return cls(
            per_image_nle=[float(v) for v in e],
            mode=mode,
            alpha=alpha,
            auc_alpha=auc_alpha(e, alpha),
            failure_rate=failure_rate(e, threshold),
            mean_nle=float(e.mean()),
            ced=[(float(t), float(f)) for t, f in zip(ts, frac)],
        )

    @classmethod
    def evaluate(cls, est, gt, mode="inter_ocular", alpha=DEFAULT_ALPHA, convention=IBUG68):
        return cls.from_errors(nle_batch(est, gt, mode, convention), mode, alpha)

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def write_ced_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["error", "fraction"])
            writer.writerows(self.ced)


def render_nle_table(results, columns, title="NLE (%)"):
    """Plain-text table: one row per method, one column per test set.

    ``results`` maps normalization mode -> method -> {column: value in %}.
    Missing entries print as ``-``.
    """
    width = max([len("Method")] + [len(m) for r in results.values() for m in r]) + 2
    col_w = max(len(c) for c in columns) + 2
    header = "Method".ljust(width) + "".join(c.rjust(col_w) for c in columns)
    lines = [title, header, "-" * len(header)]
    for mode, methods in results.items():
        lines.append(f"[{mode.replace('_', '-')} normalization]")
        for method, vals in methods.items():
            cells = [
                (f"{vals[c]:.2f}" if vals.get(c) is not None else "-").rjust(col_w)
                for c in columns
            ]
            lines.append(method.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def render_auc_table(rows, alpha=DEFAULT_ALPHA):
    """``rows`` is a list of ``(test_set, method, auc, failure)``."""
    lines = [f"{'Test Set':<16}{'Method':<22}{'AUC_' + str(alpha):>10}{'Failure (%)':>14}"]
    lines.append("-" * len(lines[0]))
    for test_set, method, auc, fail in rows:
        lines.append(f"{test_set:<16}{method:<22}{auc:>10.2f}{fail:>14.2f}")
    return "\n".join(lines) + "\n"


def report_table(report, label="desk-scale", test_set="synthetic"):
    """Desk-scale report next to the reference CCNN numbers."""
    mode = report.mode
    ref = REFERENCE_RESULTS["300w_public"][mode]
    nle_rows = {mode: {"CCNN (reference, 300-W)": ref, f"CCNN ({label})": {test_set: 100 * report.mean_nle}}}
    table = render_nle_table(nle_rows, list(ref) + [test_set])
    auc_rows = [(k, "CCNN (reference)", v["auc"], v["failure"]) for k, v in REFERENCE_RESULTS["auc"].items()]
    auc_rows.append((test_set, f"CCNN ({label})", report.auc_alpha, report.failure_rate))
    return table + "\n" + render_auc_table(auc_rows, report.alpha)
