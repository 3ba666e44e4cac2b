"""Evaluation: MVTec-style datasets, pixel ROC AUC, class gap, H0 calibration."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from .imagio import load_image

__all__ = [
    "UndefinedMetricError",
    "LabeledSample",
    "load_dataset",
    "find_categories",
    "load_mask",
    "roc_auc",
    "gap",
    "EvalRow",
    "EvalReport",
    "evaluate_category",
    "evaluate",
    "NoiseSpec",
    "make_noise",
    "CalibrationReport",
    "calibrate_h0",
    "count_detections",
]

EPSILONS = (1.0, 0.1, 0.01)
IMAGE_SUFFIXES = (".png",)


class UndefinedMetricError(ValueError):
    """The metric needs both normal and anomalous samples."""


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LabeledSample:
    image_path: Path
    mask_path: Optional[Path]  # None: every pixel is normal
    category: str
    defect: str


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def load_dataset(root) -> tuple[list[LabeledSample], list[str]]:
    """Pair ``test/<defect>/NNN.png`` with ``ground_truth/<defect>/NNN_mask.png``.

    Returns ``(samples, errors)``.  Images without a mask (``test/good`` in
    particular) are all-normal.  Unreadable images, orphan masks and
    size mismatches are reported in ``errors`` and skipped.
    """
    root = Path(root)
    category = root.name
    test_dir, gt_dir = root / "test", root / "ground_truth"
    samples: list[LabeledSample] = []
    errors: list[str] = []
    if not test_dir.is_dir():
        return samples, [f"{root}: no test/ directory"]

    used_masks: set[Path] = set()
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        for img in sorted(p for p in defect_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            mask = gt_dir / defect_dir.name / f"{img.stem}_mask.png"
            try:
                size = _image_size(img)
            except (OSError, SyntaxError) as exc:
                errors.append(f"{img}: unreadable image ({exc})")
                continue
            if mask.is_file():
                used_masks.add(mask)
                try:
                    msize = _image_size(mask)
                except (OSError, SyntaxError) as exc:
                    errors.append(f"{mask}: unreadable mask ({exc})")
                    continue
                if msize != size:
                    errors.append(f"{img}: mask size {msize} differs from image size {size}")
                    continue
                samples.append(LabeledSample(img, mask, category, defect_dir.name))
            else:
                samples.append(LabeledSample(img, None, category, defect_dir.name))

    if gt_dir.is_dir():
        for mask in sorted(gt_dir.glob("*/*_mask.png")):
            if mask not in used_masks:
                errors.append(f"{mask}: orphan mask (no matching test image)")
    return samples, errors


def find_categories(root) -> list[Path]:
    """Category roots under ``root`` (or ``root`` itself if it has ``test/``)."""
    root = Path(root)
    if (root / "test").is_dir():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "test").is_dir())


def load_mask(sample: LabeledSample, shape: tuple[int, int]) -> np.ndarray:
    """Binary ground truth; any nonzero mask pixel is anomalous."""
    if sample.mask_path is None:
        return np.zeros(shape, dtype=bool)
    mask = load_image(sample.mask_path)
    return mask.max(axis=0) > 0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("both classes must be present")
    return scores, labels, n_pos


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (midranks for ties)."""
    scores, labels, n_pos = _split(scores, labels)
    n_neg = labels.size - n_pos
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gap(scores, labels) -> float:
    """Median anomaly score of anomalous pixels minus that of normal pixels."""
    scores, labels, _ = _split(scores, labels)
    return float(np.median(scores[labels]) - np.median(scores[~labels]))


@dataclass
class EvalRow:
    category: str
    variant: str
    auc: float
    gap: float
    n_pixels: int
    n_images: int = 0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "variant", "auc", "gap", "n_pixels"])
        for r in self.rows:
            writer.writerow([r.category, r.variant, f"{r.auc:.6f}", f"{r.gap:.6f}", r.n_pixels])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'category':<12} {'variant':<16} {'auc':>7} {'gap':>8} {'pixels':>12}"]
        for r in self.rows:
            lines.append(f"{r.category:<12} {r.variant:<16} {r.auc:7.4f} {r.gap:8.3f} "
                         f"{r.n_pixels:12d}")
        if self.rows:
            lines.append(f"{'mean':<12} {'':<16} {np.mean([r.auc for r in self.rows]):7.4f} "
                         f"{np.mean([r.gap for r in self.rows]):8.3f}")
        for e in self.errors:
            lines.append(f"skipped: {e}")
        return "\n".join(lines) + "\n"


def _score_sample(sample: LabeledSample, cfg):
    from .pipeline import detect

    image = load_image(sample.image_path)
    score = detect(image, cfg).anomaly_map.score
    return score.ravel(), load_mask(sample, score.shape).ravel()


def evaluate_category(root, cfg, threads: int = 1) -> tuple[Optional[EvalRow], list[str]]:
    """Pixel-level AUC and GAP for one category directory.

    Samples may be scored concurrently; results are concatenated in
    sorted sample order so the metrics do not depend on ``threads``.
    """
    samples, errors = load_dataset(root)
    if not samples:
        return None, errors
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: _score_sample(s, cfg), samples))
    else:
        parts = [_score_sample(s, cfg) for s in samples]
    scores = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    category = Path(root).name
    try:
        row = EvalRow(category, cfg.variant, roc_auc(scores, labels), gap(scores, labels),
                      int(scores.size), len(samples))
    except UndefinedMetricError as exc:
        return None, errors + [f"{category}: {exc}"]
    return row, errors


def evaluate(root, cfg, threads: int = 1, categories: Optional[Sequence[str]] = None,
             progress=None) -> EvalReport:
    """Evaluate every category under ``root`` (or ``root`` itself)."""
    report = EvalReport()
    for cat_root in find_categories(root):
        if categories is not None and cat_root.name not in categories:
            continue
        row, errors = evaluate_category(cat_root, cfg, threads)
        report.errors.extend(errors)
        if row is not None:
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report


# ---------------------------------------------------------------------------
# H0 calibration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"  # gaussian | uniform | phase
    height: int = 256
    width: int = 256
    channels: int = 1
    mean: float = 0.5
    std: float = 0.1
    texture: Optional[np.ndarray] = field(default=None, compare=False, repr=False)


def _phase_randomize(texture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.fft2(texture - texture.mean())
    # phases of a real white-noise field keep the Hermitian symmetry
    phase = np.angle(np.fft.fft2(rng.standard_normal(texture.shape)))
    field_ = np.real(np.fft.ifft2(np.abs(spectrum) * np.exp(1j * phase)))
    return field_ + texture.mean()


def make_noise(spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """One H0 image of shape ``(C, H, W)`` clipped to [0, 1]."""
    shape = (spec.channels, spec.height, spec.width)
    if spec.kind == "gaussian":
        img = spec.mean + spec.std * rng.standard_normal(shape)
    elif spec.kind == "uniform":
        half = spec.std * math.sqrt(3.0)
        img = rng.uniform(spec.mean - half, spec.mean + half, shape)
    elif spec.kind == "phase":
        if spec.texture is None:
            raise ValueError("phase-randomized noise needs a source texture")
        tex = np.asarray(spec.texture, dtype=np.float64)
        if tex.ndim == 2:
            tex = tex[None]
        img = np.stack([_phase_randomize(t, rng) for t in tex])
    else:
        raise ValueError(f"unknown noise kind {spec.kind!r}")
    return np.clip(img, 0.0, 1.0)


def count_detections(result, strategy: str, epsilon: float) -> np.ndarray:
    """ε-meaningful events per scale: pixels, blocks or regions with NFA < ε.

    Every channel and component map of a scale is its own family of tests,
    so counts are summed over those families within each scale.  Pixel
    counts skip the clamp-border margin, whose values repeat inner tests.
    """
    thr = math.log10(epsilon)
    n_scales = len(result.scale_maps)
    counts = np.zeros(n_scales, dtype=np.int64)
    if strategy == "pixel":
        for m in result.unit_maps:
            g = m.margin
            h, w = m.shape
            distinct = m.log10_nfa[g:h - g, g:w - g]
            counts[m.scale_index] += int(np.count_nonzero(distinct < thr))
    elif strategy == "block":
        for m in result.unit_maps:
            counts[m.scale_index] += sum(1 for *_, v in m.meta["blocks"] if v < thr)
    elif strategy == "region":
        for k, _, _, rset in result.regions:
            counts[k] += sum(1 for r in rset if r.log10_nfa < thr)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return counts


@dataclass
class CalibrationReport:
    strategy: str
    noise: str
    epsilons: tuple[float, ...]
    counts: np.ndarray  # (trials, len(epsilons), scales)
    seed: int

    @property
    def trials(self) -> int:
        return self.counts.shape[0]

    def head(self, n: int) -> "CalibrationReport":
        """Report restricted to the first ``n`` trials (same seed stream)."""
        return CalibrationReport(self.strategy, self.noise, self.epsilons,
                                 self.counts[:n], self.seed)

    def mean_per_scale(self) -> np.ndarray:
        """Mean ε-meaningful events per trial for each scale, shape (eps, scales)."""
        return self.counts.mean(axis=0)

    def mean_total(self) -> np.ndarray:
        """Mean events per trial summed over all scales, shape (eps,)."""
        return self.counts.sum(axis=2).mean(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "noise", "epsilon", "scale", "trials",
                         "mean_detections", "max_detections"])
        per_scale = self.mean_per_scale()
        for i, eps in enumerate(self.epsilons):
            for k in range(self.counts.shape[2]):
                writer.writerow([self.strategy, self.noise, eps, k, self.trials,
                                 f"{per_scale[i, k]:.6f}", int(self.counts[:, i, k].max())])
            writer.writerow([self.strategy, self.noise, eps, "all", self.trials,
                             f"{self.mean_total()[i]:.6f}",
                             int(self.counts[:, i].sum(axis=1).max())])
        return buf.getvalue()


def calibrate_h0(noise: NoiseSpec, cfg, trials: int, seed: int = 0,
                 epsilons: Sequence[float] = EPSILONS, progress=None) -> CalibrationReport:
    """Run the detector on ``trials`` seeded noise images and count false alarms.

    Trial ``t`` draws from its own child of ``SeedSequence(seed)``, so the
    first ``n`` trials of a longer run reproduce a run with ``trials=n``.
    """
    from .pipeline import detect

    if trials < 1:
        raise ValueError("trials must be >= 1")
    children = np.random.SeedSequence(seed).spawn(trials)
    rows = []
    for t, child in enumerate(children):
        img = make_noise(noise, np.random.default_rng(child))
        result = detect(img, cfg)
        rows.append([count_detections(result, cfg.nfa, e) for e in epsilons])
        if progress is not None:
            progress(t + 1, trials)
    return CalibrationReport(cfg.nfa, noise.kind, tuple(epsilons),
                             np.asarray(rows, dtype=np.int64), seed)
