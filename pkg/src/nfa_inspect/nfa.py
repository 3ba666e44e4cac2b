"""A contrario detection statistics on squared-distance maps.

Three ways of turning a distance-to-normality map into Number of False
Alarms values, all kept as ``log10(NFA)`` so that very significant events
do not underflow:

* per pixel: ``HW * sf_chi2(m)(d2)``;
* per block: binomial tail of the count of over-threshold pixels in a
  ``w x w`` window, with counts renormalized by the independence length;
* per region: greedy growth of 4-connected regions, scored with the
  lattice-animal count ``alpha * beta**n / n`` and a chi-square tail on the
  accumulated distance.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .special import chi2_logsf, chi2_logsf_scalar, chi2_quantile, log_binomial_tail
from .statcore import DistanceMap

__all__ = [
    "NfaMap",
    "BlockNfaConfig",
    "RegionNfaConfig",
    "Region",
    "RegionSet",
    "nfa_pixel",
    "nfa_block",
    "nfa_region",
    "region_log10_nfa",
    "min_combine",
    "ALPHA",
    "BETA",
]

LN10 = math.log(10.0)
ALPHA = 0.316915
BETA = 4.062570


@dataclass
class NfaMap:
    log10_nfa: np.ndarray
    strategy: str
    scale_index: int = 0
    channel_index: int = 0
    component: int = -1
    log10_n_tests: float = 0.0
    meta: dict = field(default_factory=dict)
    margin: int = 0  # edge pixels that repeat an inner test (clamp border)

    def __post_init__(self):
        # +0.0 only, so minima are bit-identical whatever the argument order
        self.log10_nfa = np.asarray(self.log10_nfa, dtype=np.float64) + 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.log10_nfa.shape


@dataclass(frozen=True)
class BlockNfaConfig:
    block_size: int = 51
    stride: int = 10
    tail_p: float = 0.01
    independence_length: Optional[float] = None  # None: take it from the distance map

    def __post_init__(self):
        if self.block_size < 1 or self.stride < 1:
            raise ValueError("block_size and stride must be >= 1")
        if not 0.0 < self.tail_p < 1.0:
            raise ValueError("tail_p must lie in (0, 1)")


@dataclass(frozen=True)
class RegionNfaConfig:
    stilde: Optional[float] = None  # None: take it from the distance map
    tail_p: float = 0.01
    alpha: float = ALPHA
    beta: float = BETA

    def __post_init__(self):
        if not 0.0 < self.tail_p < 1.0:
            raise ValueError("tail_p must lie in (0, 1)")
        if self.stilde is not None and self.stilde < 1:
            raise ValueError("stilde must be >= 1")


# ---------------------------------------------------------------------------
# Pixels
# ---------------------------------------------------------------------------
def nfa_pixel(dist: DistanceMap) -> NfaMap:
    """One test per distinct pixel: edge pixels that copy an inner value add no test."""
    h, w = dist.shape
    g = dist.margin
    log_tests = math.log10((h - 2 * g) * (w - 2 * g))
    log_nfa = log_tests + chi2_logsf(dist.d2, dist.df) / LN10
    return NfaMap(np.asarray(log_nfa), "pixel", dist.scale_index, dist.channel_index,
                  dist.component, log_tests, margin=g)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------
def _block_starts(n: int, w: int, stride: int) -> list[int]:
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def nfa_block(dist: DistanceMap, cfg: BlockNfaConfig = BlockNfaConfig()) -> NfaMap:
    """Binomial NFA of over-threshold pixel concentrations in sliding blocks.

    Each pixel receives the smallest NFA among the blocks covering it.  The
    per-block values are kept in ``meta["blocks"]`` as ``(row, col, log10)``.
    """
    h, w_img = dist.shape
    w = cfg.block_size
    s = float(cfg.independence_length or dist.independence_length)
    if w < s:
        raise ValueError(f"block size {w} is smaller than the independence length {s}")
    if h < w or w_img < w:
        raise ValueError(f"image {h}x{w_img} is smaller than the {w}x{w} block")

    tau = chi2_quantile(1.0 - cfg.tail_p, dist.df)
    cand = (dist.d2 > tau).astype(np.int64)
    integral = np.zeros((h + 1, w_img + 1), dtype=np.int64)
    integral[1:, 1:] = cand.cumsum(0).cumsum(1)

    rows = _block_starts(h, w, cfg.stride)
    cols = _block_starts(w_img, w, cfg.stride)
    r = np.asarray(rows)[:, None]
    c = np.asarray(cols)[None, :]
    counts = integral[r + w, c + w] - integral[r, c + w] - integral[r + w, c] + integral[r, c]

    n_trials = w * w / (s * s)
    log_tests = math.log10(h * w_img / (w * w) * s * s)
    cache: dict[int, float] = {}
    block_log = np.empty(counts.shape)
    for idx, cnt in np.ndenumerate(counts):
        cnt = int(cnt)
        if cnt not in cache:
            cache[cnt] = log_binomial_tail(n_trials, cnt / (s * s), cfg.tail_p) / LN10
        block_log[idx] = log_tests + cache[cnt]

    out = np.full((h, w_img), np.inf)
    for i, y in enumerate(rows):
        band = out[y:y + w]
        for j, x in enumerate(cols):
            np.minimum(band[:, x:x + w], block_log[i, j], out=band[:, x:x + w])

    blocks = [(y, x, float(block_log[i, j]))
              for i, y in enumerate(rows) for j, x in enumerate(cols)]
    return NfaMap(out, "block", dist.scale_index, dist.channel_index, dist.component,
                  log_tests, meta={"blocks": blocks, "tau": tau, "counts": counts})


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------
@dataclass
class Region:
    pixels: list[tuple[int, int]]  # (row, col), in insertion order
    sum_d2: float
    log10_nfa: float
    trace: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.pixels)


@dataclass
class RegionSet:
    regions: list[Region]
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def to_text(self) -> str:
        """One region per line: ``N_R log10_nfa x0,y0;x1,y1;...``."""
        lines = []
        for reg in self.regions:
            coords = ";".join(f"{x},{y}" for y, x in reg.pixels)
            lines.append(f"{reg.size} {reg.log10_nfa:.17g} {coords}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, shape: tuple[int, int]) -> "RegionSet":
        regions = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            n, lnfa, coords = line.split(" ", 2)
            pixels = []
            for pair in coords.split(";"):
                x, y = pair.split(",")
                pixels.append((int(y), int(x)))
            if len(pixels) != int(n):
                raise ValueError(f"region line declares {n} pixels, lists {len(pixels)}")
            regions.append(Region(pixels, float("nan"), float(lnfa)))
        return cls(regions, shape)


def region_log10_nfa(n_pixels: int, sum_d2: float, image_area: float, stilde: float = 1.0,
                     alpha: float = ALPHA, beta: float = BETA) -> float:
    """log10 NFA of a 4-connected region of ``n_pixels`` with accumulated ``sum_d2``."""
    s2 = stilde * stilde
    n_eff = n_pixels / s2
    return (math.log10(image_area / s2) + math.log10(alpha) + n_eff * math.log10(beta)
            - math.log10(n_eff) + chi2_logsf_scalar(sum_d2 / s2, n_eff) / LN10)


def _local_maxima(d2: np.ndarray, tau: float) -> np.ndarray:
    padded = np.pad(d2, 1, mode="constant", constant_values=-np.inf)
    center = padded[1:-1, 1:-1]
    is_max = ((center >= padded[:-2, 1:-1]) & (center >= padded[2:, 1:-1])
              & (center >= padded[1:-1, :-2]) & (center >= padded[1:-1, 2:]))
    return is_max & (d2 > tau)


def nfa_region(dist: DistanceMap, cfg: RegionNfaConfig = RegionNfaConfig()):
    """Greedy region growing driven by the region NFA itself.

    Seeds are 4-neighbourhood local maxima of ``d2`` above the chi-square
    threshold, visited by decreasing ``d2``.  A region absorbs its highest
    frontier pixel (ties: row-major) only if that strictly lowers its NFA;
    otherwise it stops, since no lower-valued frontier pixel could do better.
    Pixels outside every region get the largest region NFA found, floored
    at NFA = 1 so that an image whose only regions are significant does not
    flag its whole background.

    Returns ``(RegionSet, NfaMap)``.
    """
    d2 = np.asarray(dist.d2, dtype=np.float64)
    h, w = d2.shape
    stilde = float(cfg.stilde or dist.independence_length)
    area = float(h * w)
    tau = chi2_quantile(1.0 - cfg.tail_p, dist.df)

    def score(n, total):
        return region_log10_nfa(n, total, area, stilde, cfg.alpha, cfg.beta)

    seeds = np.flatnonzero(_local_maxima(d2, tau))
    flat = d2.ravel()
    seeds = seeds[np.argsort(-flat[seeds], kind="stable")]

    owner = np.full(h * w, -1, dtype=np.int64)
    queued = np.full(h * w, -1, dtype=np.int64)
    regions: list[Region] = []

    for seed in seeds:
        if owner[seed] >= 0:
            continue
        rid = len(regions)
        owner[seed] = rid
        total = float(flat[seed])
        current = score(1, total)
        pixels = [divmod(int(seed), w)]
        trace = [current]
        frontier: list[tuple[float, int]] = []

        def push_neighbours(p):
            y, x = divmod(p, w)
            for q in (p - w if y > 0 else -1, p - 1 if x > 0 else -1,
                      p + 1 if x < w - 1 else -1, p + w if y < h - 1 else -1):
                if q >= 0 and owner[q] < 0 and queued[q] != rid:
                    queued[q] = rid
                    heapq.heappush(frontier, (-flat[q], q))

        push_neighbours(int(seed))
        while frontier:
            neg, q = frontier[0]
            candidate = score(len(pixels) + 1, total - neg)
            if not candidate < current:
                break
            heapq.heappop(frontier)
            owner[q] = rid
            total -= neg
            current = candidate
            pixels.append(divmod(q, w))
            trace.append(current)
            push_neighbours(q)
        regions.append(Region(pixels, total, current, trace))

    # background takes the largest region NFA, but never a meaningful one
    fill = max([0.0] + [r.log10_nfa for r in regions])
    if regions:
        values = np.array([r.log10_nfa for r in regions])
        out = np.where(owner >= 0, values[np.maximum(owner, 0)], fill).reshape(h, w)
    else:
        out = np.full((h, w), fill)
    nfa_map = NfaMap(out, "region", dist.scale_index, dist.channel_index, dist.component,
                     math.log10(area / (stilde * stilde)), meta={"tau": tau})
    return RegionSet(regions, (h, w)), nfa_map


# ---------------------------------------------------------------------------
# Combination
# ---------------------------------------------------------------------------
def min_combine(maps: Sequence[NfaMap]) -> NfaMap:
    """Elementwise minimum of log10 NFA over maps of identical size."""
    maps = list(maps)
    if not maps:
        raise ValueError("min_combine needs at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"cannot combine maps of sizes {shape} and {m.shape}")
    out = maps[0].log10_nfa.copy()
    for m in maps[1:]:
        np.minimum(out, m.log10_nfa, out=out)
    strategies = sorted({m.strategy for m in maps})
    return NfaMap(out, "+".join(strategies), maps[0].scale_index, -1, -1,
                  max(m.log10_n_tests for m in maps), margin=max(m.margin for m in maps))
