"""Feature extraction: Patch-PCA filter banks, a fixed Gabor bank, external tensors.

Every extractor ends in a :class:`FeatureStack`, i.e. ``m`` pixel-aligned
feature planes plus the distance (in pixels) beyond which feature values
may be treated as independent.  Filtering is cross-correlation with reflect
padding, so each output plane has the size of its input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagio import _fix_signs, read_nfat, resize

__all__ = [
    "PatchPcaConfig",
    "GaborBankConfig",
    "FilterBank",
    "FeatureStack",
    "fit_patch_pca",
    "apply_bank",
    "patch_pca_features",
    "build_gabor_bank",
    "gabor_kernel",
    "decorrelate_channels",
    "ingest_external_features",
]

# patch-matrix elements materialized per chunk (~32 MB of float64)
_CHUNK_ELEMS = 4_000_000
# patch matrices up to this many elements are kept for reuse (~200 MB)
_CACHE_ELEMS = 25_000_000


@dataclass(frozen=True)
class PatchPcaConfig:
    patch_size: int = 17
    num_components: int = 45

    def __post_init__(self):
        s, m = self.patch_size, self.num_components
        if s < 3 or s % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {s}")
        if not 1 <= m <= s * s:
            raise ValueError(f"num_components must be in 1..{s * s}, got {m}")


@dataclass(frozen=True)
class GaborBankConfig:
    kernel_sizes: tuple[int, ...] = (7, 9, 11, 13, 15, 19, 23, 27, 31)
    orientations: tuple[float, ...] = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
    phases: tuple[float, ...] = (0.0, math.pi / 2)
    wavelength_factor: float = 0.5
    sigma_factor: float = 0.4

    @property
    def num_filters(self) -> int:
        return len(self.kernel_sizes) * len(self.orientations) * len(self.phases)


@dataclass
class FilterBank:
    """A list of odd-sized 2-D kernels.

    For a PCA bank, ``eigenvalues`` holds the (floored) variances of the
    kept components and ``mean`` the flattened mean patch, which is
    subtracted before projecting.
    """

    kernels: list[np.ndarray]
    kind: str = "custom"
    eigenvalues: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    degenerate: bool = False

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("filter bank is empty")
        for k in self.kernels:
            if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise ValueError(f"kernels must be square with odd size, got {k.shape}")
            if not np.all(np.isfinite(k)):
                raise ValueError("kernel contains non-finite values")

    def __len__(self) -> int:
        return len(self.kernels)

    @property
    def kernel_sizes(self) -> list[int]:
        return [k.shape[0] for k in self.kernels]

    @property
    def independence_length(self) -> int:
        return max(self.kernel_sizes)


@dataclass
class FeatureStack:
    planes: np.ndarray  # (m, H, W)
    scale_index: int = 0
    channel_index: int = 0
    extractor: str = "pca"
    independence_length: float = 1.0
    meta: dict = field(default_factory=dict)
    # edge rows/columns whose values copy an inner window (clamp border)
    margin: int = 0

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] < 1:
            raise ValueError(f"feature planes must be (m, H, W), got {self.planes.shape}")
        if self.independence_length < 1:
            raise ValueError("independence_length must be >= 1")
        if self.margin < 0 or 2 * self.margin >= min(self.planes.shape[1:]):
            raise ValueError(f"margin {self.margin} leaves no inner pixels")

    @property
    def num_features(self) -> int:
        return self.planes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1:]


# ---------------------------------------------------------------------------
# Patch machinery
# ---------------------------------------------------------------------------
BORDER_MODES = ("reflect", "clamp")


def _iter_patches(plane: np.ndarray, size: int,
                  border: str = "reflect") -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(row0, row1, patches)`` covering the plane in raster order.

    ``patches`` has shape ``((row1 - row0) * w, size * size)``; chunks
    concatenate to the full patch matrix.  With ``border="reflect"`` there
    is one reflect-padded patch per pixel (``w`` = plane width); with
    ``"clamp"`` only the patches lying fully inside the plane are produced
    (``w`` = plane width - size + 1).
    """
    if border == "reflect":
        r = size // 2
        source = np.pad(plane, r, mode="reflect")
    elif border == "clamp":
        source = plane
    else:
        raise ValueError(f"border must be one of {BORDER_MODES}, got {border!r}")
    windows = sliding_window_view(source, (size, size))
    h, w = windows.shape[:2]
    rows = max(1, _CHUNK_ELEMS // (w * size * size))
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        yield y0, y1, windows[y0:y1].reshape((y1 - y0) * w, size * size)


def _materialize(plane: np.ndarray, size: int, border: str):
    """Patch chunks as a list when they fit in memory, else ``None``."""
    h, w = plane.shape
    if h * w * size * size > _CACHE_ELEMS:
        return None
    return list(_iter_patches(plane, size, border))


def _fit_from_chunks(chunks, s: int, m: int, offset: float) -> FilterBank:
    n = s * s
    scatter = np.zeros((n, n))
    total = np.zeros(n)
    count = 0
    for _, _, patches in chunks:
        scatter += patches.T @ patches
        total += patches.sum(axis=0)
        count += patches.shape[0]
    mean = total / count
    cov = scatter / count - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)

    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:m]
    kept = np.clip(evals[order], 0.0, None)
    evecs = _fix_signs(evecs[:, order])

    trace = max(float(np.trace(cov)), 0.0)
    floor = 1e-12 * trace if trace > 0 else 1e-12
    return FilterBank(
        kernels=[evecs[:, i].reshape(s, s).copy() for i in range(m)],
        kind="pca",
        eigenvalues=np.maximum(kept, floor),
        mean=mean + offset,
        degenerate=bool(np.any(kept <= floor)),
    )


def fit_patch_pca(plane: np.ndarray, cfg: PatchPcaConfig = PatchPcaConfig(),
                  border: str = "reflect") -> FilterBank:
    """Learn a PCA filter bank from all ``s x s`` patches of one plane.

    The covariance is accumulated over every pixel's patch in a fixed
    order (reflect-padded, one patch per pixel) or, with ``border="clamp"``,
    over the patches fully inside the plane.  Eigenvalues below ``1e-12``
    times the total patch variance are floored to that value and the bank
    is flagged ``degenerate``.
    """
    plane = np.asarray(plane, dtype=np.float64)
    s, m = cfg.patch_size, cfg.num_components
    if plane.ndim != 2 or min(plane.shape) < s:
        raise ValueError(f"plane {plane.shape} is smaller than the {s}x{s} patch")
    offset = plane.mean()
    return _fit_from_chunks(_iter_patches(plane - offset, s, border), s, m, offset)


def _project(plane: np.ndarray, size: int, border: str, weights: np.ndarray,
             shift: np.ndarray, chunks=None) -> np.ndarray:
    h, w = plane.shape
    k = weights.shape[1]
    if chunks is None:
        chunks = _iter_patches(plane, size, border)
    if border == "clamp":
        r = size // 2
        valid = np.empty((k, h - size + 1, w - size + 1))
        for y0, y1, patches in chunks:
            proj = patches @ weights - shift
            valid[:, y0:y1, :] = proj.T.reshape(k, y1 - y0, -1)
        return np.pad(valid, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.empty((k, h, w))
    for y0, y1, patches in chunks:
        proj = patches @ weights - shift
        out[:, y0:y1, :] = proj.T.reshape(k, y1 - y0, w)
    return out


def apply_bank(plane: np.ndarray, bank: FilterBank, *, scale_index: int = 0,
               channel_index: int = 0, border: str = "reflect") -> FeatureStack:
    """Cross-correlate ``plane`` with every kernel of ``bank``; output size = input size.

    For PCA banks the mean patch is removed first, so output ``i`` at a
    pixel is the inner product of (patch - mean patch) with kernel ``i``.

    ``border="reflect"`` pads the plane by reflection.  ``border="clamp"``
    instead gives each pixel near the edge the response of the nearest
    window lying fully inside the plane, so every output value comes from a
    genuine image patch.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError("apply_bank expects a single 2-D plane")
    if min(plane.shape) < bank.independence_length:
        raise ValueError(
            f"plane {plane.shape} is smaller than the largest kernel "
            f"({bank.independence_length})")
    h, w = plane.shape
    out = np.empty((len(bank), h, w))

    groups: dict[int, list[int]] = {}
    for i, size in enumerate(bank.kernel_sizes):
        groups.setdefault(size, []).append(i)

    for size, idx in groups.items():
        weights = np.stack([bank.kernels[i].ravel() for i in idx], axis=1)
        shift = np.zeros(len(idx))
        if bank.mean is not None and bank.mean.size == size * size:
            shift = bank.mean @ weights
        out[idx] = _project(plane, size, border, weights, shift)

    margin = max(bank.kernel_sizes) // 2 if border == "clamp" else 0
    return FeatureStack(out, scale_index=scale_index, channel_index=channel_index,
                        extractor=bank.kind, independence_length=bank.independence_length,
                        margin=margin)


def patch_pca_features(plane: np.ndarray, cfg: PatchPcaConfig = PatchPcaConfig(),
                       border: str = "reflect", *, scale_index: int = 0,
                       channel_index: int = 0) -> tuple[FilterBank, FeatureStack]:
    """``fit_patch_pca`` followed by ``apply_bank``, sharing one patch pass when possible."""
    plane = np.asarray(plane, dtype=np.float64)
    s, m = cfg.patch_size, cfg.num_components
    if plane.ndim != 2 or min(plane.shape) < s:
        raise ValueError(f"plane {plane.shape} is smaller than the {s}x{s} patch")
    offset = plane.mean()
    centered = plane - offset
    chunks = _materialize(centered, s, border)
    bank = _fit_from_chunks(chunks if chunks is not None
                            else _iter_patches(centered, s, border), s, m, offset)
    weights = np.stack([k.ravel() for k in bank.kernels], axis=1)
    shift = (bank.mean - offset) @ weights
    planes = _project(centered, s, border, weights, shift, chunks)
    stack = FeatureStack(planes, scale_index=scale_index, channel_index=channel_index,
                         extractor="pca", independence_length=s,
                         margin=s // 2 if border == "clamp" else 0)
    return bank, stack


# ---------------------------------------------------------------------------
# Gabor bank
# ---------------------------------------------------------------------------
def gabor_kernel(size: int, theta: float, phase: float, wavelength: float,
                 sigma: float) -> np.ndarray:
    """Raw (un-normalized) real Gabor kernel sampled on an odd grid."""
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    envelope = np.exp(-(xr ** 2 + yr ** 2) / (2.0 * sigma ** 2))
    return envelope * np.cos(2.0 * math.pi * xr / wavelength + phase)


def build_gabor_bank(cfg: GaborBankConfig = GaborBankConfig()) -> FilterBank:
    """Fixed Gabor bank, each kernel zero-mean and unit L2 norm.

    Kernel order: size-major, then orientation, then phase.
    """
    if not cfg.kernel_sizes or not cfg.orientations or not cfg.phases:
        raise ValueError("Gabor bank needs at least one size, orientation and phase")
    kernels = []
    for size in cfg.kernel_sizes:
        if size < 3 or size % 2 == 0:
            raise ValueError(f"Gabor kernel sizes must be odd and >= 3, got {size}")
        for theta in cfg.orientations:
            for phase in cfg.phases:
                k = gabor_kernel(size, theta, phase, cfg.wavelength_factor * size,
                                 cfg.sigma_factor * size)
                k = k - k.mean()
                norm = np.linalg.norm(k)
                if norm == 0:
                    raise ValueError(f"degenerate Gabor kernel (size={size}, phase={phase})")
                kernels.append(k / norm)
    return FilterBank(kernels=kernels, kind="gabor")


# ---------------------------------------------------------------------------
# External (deep) features
# ---------------------------------------------------------------------------
def decorrelate_channels(tensor: np.ndarray, num_components: int):
    """PCA over the channels of a ``(C, h, w)`` tensor (samples = grid positions).

    Returns ``(components, eigenvalues)`` with ``components`` of shape
    ``(num_components, h, w)`` in descending-variance order.
    """
    c, h, w = tensor.shape
    if not 1 <= num_components <= c:
        raise ValueError(f"num_components={num_components} not in 1..{c}")
    x = tensor.reshape(c, -1)
    xc = x - x.mean(axis=1, keepdims=True)
    cov = xc @ xc.T / xc.shape[1]
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals, kind="stable")[::-1][:num_components]
    evecs = _fix_signs(evecs[:, order])
    comps = (evecs.T @ xc).reshape(num_components, h, w)
    return comps, np.clip(evals[order], 0.0, None)


def _grid_stride(image_size: tuple[int, int], grid: tuple[int, int]) -> int:
    (H, W), (h, w) = image_size, grid
    sy, sx = H / h, W / w
    stride = round(sy)
    if stride < 1 or round(sx) != stride or abs(h * stride - H) >= stride \
            or abs(w * stride - W) >= stride:
        raise ValueError(f"feature grid {h}x{w} does not divide image grid {H}x{W}")
    return stride


def ingest_external_features(path, image_size: tuple[int, int], num_components: int = 5,
                             stilde: Optional[float] = None,
                             upsample: str = "bilinear") -> FeatureStack:
    """Load an NFAT activation tensor, decorrelate it and bring it to image size.

    The effective independence length defaults to the grid stride
    (image size / feature-map size).
    """
    tensor = read_nfat(path)
    c = tensor.shape[0]
    if num_components > c:
        raise ValueError(f"asked for {num_components} components from {c} channels")
    if not np.all(np.isfinite(tensor)):
        raise ValueError(f"{path}: tensor contains non-finite values")
    stride = _grid_stride(tuple(image_size), tensor.shape[1:])
    comps, evals = decorrelate_channels(tensor, num_components)
    planes = np.stack([resize(p, tuple(image_size), upsample) for p in comps])
    return FeatureStack(planes, extractor="external",
                        independence_length=float(stilde if stilde else stride),
                        meta={"stride": stride, "eigenvalues": evals})
