"""Multi-scale a contrario anomaly detection for textured surfaces."""
from .evalkit import calibrate_h0, evaluate, gap, load_dataset, roc_auc
from .fusion import AnomalyMap, fuse_scales, segment
from .imagio import build_pyramid, load_image, multilight_pca, read_nfat, write_nfat
from .nfa import min_combine, nfa_block, nfa_pixel, nfa_region
from .pipeline import DetectorConfig, detect

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "DetectorConfig",
    "build_pyramid",
    "calibrate_h0",
    "detect",
    "evaluate",
    "fuse_scales",
    "gap",
    "load_dataset",
    "load_image",
    "min_combine",
    "multilight_pca",
    "nfa_block",
    "nfa_pixel",
    "nfa_region",
    "read_nfat",
    "roc_auc",
    "segment",
    "write_nfat",
]
