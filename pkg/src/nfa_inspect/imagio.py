"""Image I/O, the NFAT tensor format, scale pyramids and multi-light PCA.

Images are handled as float64 arrays of shape ``(C, H, W)`` with values in
``[0, 1]`` (channel-major, row-major), which is also the layout of NFAT
files.

NFAT layout (little endian)::

    b"NFAT" | u32 version=1 | u32 C | u32 H | u32 W | C*H*W float32
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "FormatError",
    "as_stack",
    "load_image",
    "save_png",
    "read_nfat",
    "write_nfat",
    "build_pyramid",
    "pyramid_shapes",
    "multilight_components",
    "multilight_pca",
    "resize",
]

NFAT_MAGIC = b"NFAT"
NFAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """A file exists and was read, but its content is not in a supported format."""


def as_stack(img) -> np.ndarray:
    """Coerce a 2-D plane or a ``(C, H, W)`` array into a validated stack."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected (C, H, W) or (H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------
_MODE_SCALE = {"L": 255.0, "RGB": 255.0, "I;16": 65535.0, "I;16B": 65535.0,
               "I;16L": 65535.0}


def load_image(path) -> np.ndarray:
    """Load an 8/16-bit grayscale or RGB raster as a ``(C, H, W)`` stack in [0, 1].

    Raises ``OSError`` when the file cannot be read or decoded and
    :class:`FormatError` for unsupported pixel formats (palette, alpha,
    binary, float).
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _MODE_SCALE:
                raise FormatError(f"{path}: unsupported image mode {mode!r}")
            data = np.array(im)
    except FormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    arr = data.astype(np.float64) / _MODE_SCALE[mode]
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def save_png(path, plane: np.ndarray) -> None:
    """Write a uint8 ``(H, W)`` plane as an 8-bit grayscale PNG."""
    plane = np.asarray(plane)
    if plane.dtype != np.uint8 or plane.ndim != 2:
        raise ValueError("save_png expects a 2-D uint8 array")
    Image.fromarray(plane, mode="L").save(path, format="PNG")


def write_nfat(path, data: np.ndarray) -> None:
    """Serialize a ``(C, H, W)`` (or ``(H, W)``) array to NFAT."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"NFAT stores 3-D tensors, got shape {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(NFAT_MAGIC, NFAT_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_nfat(path) -> np.ndarray:
    """Read an NFAT file into a float64 ``(C, H, W)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated NFAT header")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != NFAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != NFAT_VERSION:
        raise FormatError(f"{path}: unsupported NFAT version {version}")
    n = c * h * w
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(c, h, w)


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------
def pyramid_shapes(height: int, width: int, num_scales: int) -> list[tuple[int, int]]:
    """Level sizes of a ceil-halving pyramid."""
    shapes = [(height, width)]
    for _ in range(num_scales - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def _halve(stack: np.ndarray) -> np.ndarray:
    c, h, w = stack.shape
    # pad odd trailing row/col with NaN so the block mean ignores it
    hp, wp = h + (h % 2), w + (w % 2)
    if (hp, wp) != (h, w):
        padded = np.full((c, hp, wp), np.nan)
        padded[:, :h, :w] = stack
    else:
        padded = stack
    blocks = padded.reshape(c, hp // 2, 2, wp // 2, 2)
    if (hp, wp) == (h, w):
        return blocks.mean(axis=(2, 4))
    return np.nanmean(blocks, axis=(2, 4))


def build_pyramid(img, num_scales: int) -> list[np.ndarray]:
    """Scale pyramid by 2x2 box averaging and decimation.

    Level 0 is ``img`` itself.  Odd trailing rows/columns are averaged over
    the pixels available in their truncated block, so nothing is dropped.
    """
    stack = as_stack(img)
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    _, h, w = stack.shape
    hk, wk = pyramid_shapes(h, w, num_scales)[-1]
    if num_scales > 1 and min(hk, wk) < 2:
        raise ValueError(
            f"{num_scales} scales on a {h}x{w} image would produce a {hk}x{wk} level")
    levels = [stack]
    for _ in range(num_scales - 1):
        levels.append(_halve(levels[-1]))
    return levels


def _axis_weights(n_in: int, n_out: int):
    # pixel centers aligned (half-pixel convention), edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(plane: np.ndarray, shape: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resample a 2-D plane to ``shape`` (bilinear or nearest, pixel-center aligned)."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    oh, ow = shape
    if (h, w) == (oh, ow):
        return plane.copy()
    if method == "nearest":
        rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.intp), h - 1)
        cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.intp), w - 1)
        return plane[np.ix_(rows, cols)]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    r0, r1, fr = _axis_weights(h, oh)
    c0, c1, fc = _axis_weights(w, ow)
    tmp = plane[r0] * (1.0 - fr)[:, None] + plane[r1] * fr[:, None]
    return tmp[:, c0] * (1.0 - fc) + tmp[:, c1] * fc


# ---------------------------------------------------------------------------
# Multi-illumination PCA
# ---------------------------------------------------------------------------
def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _views_matrix(views: Sequence) -> np.ndarray:
    if len(views) != 5:
        raise ValueError(f"multi-light set needs exactly 5 views, got {len(views)}")
    planes = []
    for v in views:
        s = as_stack(v)
        if s.shape[0] != 1:
            raise ValueError("multi-light views must be single channel")
        planes.append(s[0])
    if len({p.shape for p in planes}) != 1:
        raise ValueError("multi-light views differ in size")
    return np.stack(planes)


def multilight_components(views: Sequence):
    """Pixel-wise PCA across the five illumination views.

    Returns ``(components, eigenvalues, eigenvectors, mean)`` where
    ``components`` has shape ``(5, H, W)`` (unscaled, descending variance)
    and ``views ~= mean + eigenvectors @ components`` pixel-wise.
    """
    stack = _views_matrix(views)
    n, h, w = stack.shape
    x = stack.reshape(n, -1)
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / xc.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = _fix_signs(evecs[:, order])
    comps = (evecs.T @ xc).reshape(n, h, w)
    return comps, evals, evecs, mean


def multilight_pca(views: Sequence, keep_last: int = 3) -> np.ndarray:
    """Keep the ``keep_last`` lowest-variance projections, each rescaled to [0, 1].

    The leading components carry the shared texture and shading; local
    relief defects concentrate in the trailing ones.  Constant planes map
    to zeros.
    """
    if not 1 <= keep_last <= 5:
        raise ValueError("keep_last must be in 1..5")
    comps, *_ = multilight_components(views)
    # rounding noise in zero-variance directions must not be stretched to [0, 1]
    tol = 1e-9 * max(float(np.ptp(comps)), 1e-300)
    out = comps[5 - keep_last:].copy()
    for i, plane in enumerate(out):
        lo, hi = plane.min(), plane.max()
        out[i] = (plane - lo) / (hi - lo) if hi - lo > tol else 0.0
    return out
