"""End-to-end detector: pyramid -> features -> distances -> NFA -> fused anomaly map."""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import (
    FilterBank,
    PatchPcaConfig,
    apply_bank,
    build_gabor_bank,
    ingest_external_features,
    patch_pca_features,
)
from .fusion import AnomalyMap, fuse_scales
from .imagio import as_stack, build_pyramid
from .nfa import (
    BlockNfaConfig,
    NfaMap,
    RegionNfaConfig,
    RegionSet,
    min_combine,
    nfa_block,
    nfa_pixel,
    nfa_region,
)
from .statcore import component_maps, fit_normality, mahalanobis_map

__all__ = ["DetectorConfig", "DetectionResult", "detect", "load_config", "dump_config",
           "ConfigError"]

EXTRACTORS = ("pca", "gabor", "external")
STRATEGIES = ("pixel", "block", "region")
DEFAULT_COMPONENTS = {"pca": 45, "external": 5}


class ConfigError(ValueError):
    """Invalid detector configuration (bad value or incompatible options)."""


@dataclass
class DetectorConfig:
    extractor: str = "pca"
    nfa: str = "pixel"
    scales: int = 4
    patch_size: int = 17
    components: Optional[int] = None  # None: 45 for pca, 5 for external; gabor uses its bank
    block_size: int = 51
    block_stride: int = 10
    tail_p: float = 0.01
    stilde: Optional[float] = None
    threshold_as: float = 0.0
    features_path: Optional[str] = None
    multilight: Optional[list[str]] = None
    keep_last: int = 3
    out_map: Optional[str] = None
    out_png: Optional[str] = None
    out_mask: Optional[str] = None
    out_regions: Optional[str] = None
    threads: int = 1
    seed: int = 0
    upsample: str = "bilinear"
    border: str = "clamp"

    def validate(self) -> "DetectorConfig":
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"extractor must be one of {EXTRACTORS}, got {self.extractor!r}")
        if self.nfa not in STRATEGIES:
            raise ConfigError(f"nfa must be one of {STRATEGIES}, got {self.nfa!r}")
        if self.scales < 1:
            raise ConfigError("scales must be >= 1")
        if self.extractor == "external" and not self.features_path:
            raise ConfigError("--extractor external requires --features-path")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError("patch-size must be odd and >= 3")
        if self.components is not None and self.components < 1:
            raise ConfigError("components must be >= 1")
        if self.extractor == "pca" and self.num_components > self.patch_size ** 2:
            raise ConfigError("components cannot exceed patch-size squared")
        if not 0.0 < self.tail_p < 1.0:
            raise ConfigError("tail-p must lie in (0, 1)")
        if self.block_size < 1 or self.block_stride < 1:
            raise ConfigError("block size and stride must be >= 1")
        if self.stilde is not None and self.stilde < 1:
            raise ConfigError("stilde must be >= 1")
        if self.multilight is not None and len(self.multilight) != 5:
            raise ConfigError("--multilight takes exactly 5 images")
        if not 1 <= self.keep_last <= 5:
            raise ConfigError("keep-last must be in 1..5")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError("upsample must be bilinear or nearest")
        if self.border not in ("reflect", "clamp"):
            raise ConfigError("border must be reflect or clamp")
        return self

    @property
    def num_components(self) -> int:
        if self.components is not None:
            return self.components
        return DEFAULT_COMPONENTS.get(self.extractor, 0)

    @property
    def variant(self) -> str:
        return f"{self.extractor}+{self.nfa}"


# ---------------------------------------------------------------------------
# Flat key = value config files
# ---------------------------------------------------------------------------
def _parse_value(name: str, raw: str):
    raw = raw.strip()
    default = getattr(DetectorConfig, name, None)
    if raw.lower() in ("", "none"):
        return None
    if name == "multilight":
        return raw.split()
    if name in ("components",):
        return int(raw)
    if name == "stilde":
        return float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path, base: Optional[DetectorConfig] = None) -> DetectorConfig:
    """Read a UTF-8 ``key = value`` file on top of ``base`` (defaults if omitted)."""
    names = {f.name for f in dataclasses.fields(DetectorConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return dataclasses.replace(base or DetectorConfig(), **values)


def dump_config(cfg: DetectorConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, list):
            text = " ".join(value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------
@dataclass
class DetectionResult:
    anomaly_map: AnomalyMap
    scale_maps: list[NfaMap]
    unit_maps: list[NfaMap] = field(default_factory=list)
    regions: list[tuple[int, int, int, RegionSet]] = field(default_factory=list)


def _score_features(stack, cfg: DetectorConfig, block_cfg, region_cfg):
    """NFA maps of one feature stack: returns (combined map, unit maps, region sets)."""
    model = fit_normality(stack)
    if cfg.nfa == "region":
        units, regions = [], []
        for dist in component_maps(stack, model):
            rset, nmap = nfa_region(dist, region_cfg)
            units.append(nmap)
            regions.append((stack.scale_index, stack.channel_index, dist.component, rset))
        combined = min_combine(units)
        combined.scale_index = stack.scale_index
        return combined, units, regions
    dist = mahalanobis_map(stack, model)
    if cfg.nfa == "pixel":
        nmap = nfa_pixel(dist)
    else:
        h, w = dist.shape
        size = min(cfg.block_size, h, w)
        nmap = nfa_block(dist, dataclasses.replace(block_cfg, block_size=size))
    return nmap, [nmap], []


def _smallest_support(cfg: DetectorConfig, gabor: Optional[FilterBank]) -> int:
    if cfg.extractor == "gabor":
        return gabor.independence_length
    return cfg.patch_size


def detect(image, cfg: DetectorConfig = DetectorConfig()) -> DetectionResult:
    """Run the full detector on a ``(C, H, W)`` image in [0, 1]."""
    cfg.validate()
    image = as_stack(image)
    _, height, width = image.shape
    block_cfg = BlockNfaConfig(cfg.block_size, cfg.block_stride, cfg.tail_p,
                               independence_length=None)
    region_cfg = RegionNfaConfig(stilde=cfg.stilde, tail_p=cfg.tail_p)

    if cfg.extractor == "external":
        stack = ingest_external_features(cfg.features_path, (height, width),
                                         cfg.num_components, stilde=cfg.stilde)
        combined, units, regions = _score_features(stack, cfg, block_cfg, region_cfg)
        return DetectionResult(fuse_scales([combined], cfg.upsample), [combined],
                               units, regions)

    gabor = build_gabor_bank() if cfg.extractor == "gabor" else None
    support = _smallest_support(cfg, gabor)
    levels = build_pyramid(image, cfg.scales)
    coarsest = levels[-1].shape[1:]
    if min(coarsest) < support:
        raise ConfigError(
            f"{cfg.scales} scales leave a {coarsest[0]}x{coarsest[1]} level, smaller "
            f"than the {support}x{support} filter support")
    if cfg.nfa == "block" and cfg.block_size < support:
        raise ConfigError("block size must be >= the patch/filter size")

    pca_cfg = PatchPcaConfig(cfg.patch_size, cfg.num_components) \
        if cfg.extractor == "pca" else None

    def work(task):
        k, c = task
        plane = levels[k][c]
        if pca_cfg:
            _, stack = patch_pca_features(plane, pca_cfg, cfg.border,
                                          scale_index=k, channel_index=c)
        else:
            stack = apply_bank(plane, gabor, scale_index=k, channel_index=c,
                               border=cfg.border)
        return _score_features(stack, cfg, block_cfg, region_cfg)

    tasks = [(k, c) for k in range(len(levels)) for c in range(levels[k].shape[0])]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    scale_maps, units, regions = [], [], []
    for k in range(len(levels)):
        per_channel = [res[0] for (kk, _), res in zip(tasks, results) if kk == k]
        merged = min_combine(per_channel)
        merged.scale_index = k
        scale_maps.append(merged)
    for _, u, r in results:
        units.extend(u)
        regions.extend(r)
    return DetectionResult(fuse_scales(scale_maps, cfg.upsample), scale_maps, units, regions)
