"""Cascaded heatmap/regression CNN for facial landmark localization."""

from .data import SyntheticSpec, generate_synthetic, load_dataset, parse_pts, read_pts, write_pts
from .estimator import CCNNLocalizer, HeatmapEncoder, PixelNormalizer
from .exceptions import (CCNNError, DegenerateAnnotationError, EmptyDatasetError, InvalidBoxError,
                         NonFiniteError, PtsParseError, ShapeError, UnsupportedConventionError)
from .geometry import FIVE_POINT, IBUG68, BoundingBox, LandmarkSet, crop_and_resize
from .heatmap import decode, encode
from .metrics import EvalReport, auc_alpha, ced, failure_rate, nle
from .model import CCNN, CCNNConfig, build_manifest, shape_audit
from .training import TrainConfig, predict, train

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CCNN", "CCNNConfig", "CCNNError", "CCNNLocalizer", "DegenerateAnnotationError",
    "EmptyDatasetError", "EvalReport", "FIVE_POINT", "HeatmapEncoder", "IBUG68", "InvalidBoxError",
    "LandmarkSet", "NonFiniteError", "PixelNormalizer", "PtsParseError", "ShapeError",
    "SyntheticSpec", "TrainConfig", "UnsupportedConventionError", "auc_alpha", "build_manifest",
    "ced", "crop_and_resize", "decode", "encode", "failure_rate", "generate_synthetic",
    "load_dataset", "nle", "parse_pts", "predict", "read_pts", "shape_audit", "train", "write_pts",
]
