"""Fuse per-scale NFA maps into one anomaly-score map and threshold it."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imagio import pyramid_shapes, resize, save_png, write_nfat
from .nfa import NfaMap

__all__ = ["AnomalyMap", "fuse_scales", "segment", "score_to_png", "export_anomaly_map"]

# AS range mapped linearly onto 0..255 in the PNG visualization
PNG_AS_RANGE = (-2.0, 10.0)


@dataclass
class AnomalyMap:
    score: np.ndarray  # AS = -log10 NFA
    provenance: list[str] = field(default_factory=list)
    min_score: float = -np.inf  # -log10 of the largest N_tests among inputs

    @property
    def shape(self) -> tuple[int, int]:
        return self.score.shape


def fuse_scales(maps: Sequence[NfaMap], method: str = "bilinear") -> AnomalyMap:
    """Upsample map ``k`` (pyramid level ``k``) to level 0 and keep the minimum NFA.

    Interpolation happens on ``log10(NFA)``.  ``method="nearest"`` keeps the
    original values, which is convenient for auditing.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("fuse_scales needs at least one map")
    base = maps[0].shape
    expected = pyramid_shapes(base[0], base[1], len(maps))
    for k, (m, shape) in enumerate(zip(maps, expected)):
        if m.shape != shape:
            raise ValueError(f"map {k} has size {m.shape}, pyramid level {k} is {shape}")

    fused = maps[0].log10_nfa.copy()
    for m in maps[1:]:
        np.minimum(fused, resize(m.log10_nfa, base, method), out=fused)
    provenance = [f"{m.strategy}@scale{k}" for k, m in enumerate(maps)]
    score = -fused
    score += 0.0  # -0.0 -> +0.0 so the result does not depend on map order
    return AnomalyMap(score, provenance, -max(m.log10_n_tests for m in maps))


def segment(amap: AnomalyMap, threshold_as: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels with ``AS > threshold_as`` (AS = 0 is NFA = 1)."""
    score = amap.score if isinstance(amap, AnomalyMap) else np.asarray(amap)
    return score > threshold_as


def score_to_png(score: np.ndarray) -> np.ndarray:
    lo, hi = PNG_AS_RANGE
    scaled = (np.clip(score, lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def export_anomaly_map(amap: AnomalyMap, *, nfat_path=None, png_path=None,
                       mask_path=None, threshold_as: float = 0.0) -> None:
    if nfat_path:
        write_nfat(nfat_path, amap.score[None])
    if png_path:
        save_png(png_path, score_to_png(amap.score))
    if mask_path:
        save_png(mask_path, segment(amap, threshold_as).astype(np.uint8) * 255)
