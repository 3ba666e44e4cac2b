"""Normality model and squared Mahalanobis distance maps.

Normality is estimated from the whole image: each feature plane gets a mean
and a variance, and the distance of a pixel to normality is the sum of its
squared standardized deviations.  For decorrelated Gaussian features this
is chi-square distributed with one degree of freedom per plane.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureStack
from .special import (
    binomial_tail,
    chi2_cdf,
    chi2_logsf,
    chi2_quantile,
    chi2_sf,
    log_binomial_tail,
)

__all__ = [
    "NormalityModel",
    "DistanceMap",
    "fit_normality",
    "mahalanobis_map",
    "component_maps",
    "variance_floor",
    "chi2_cdf",
    "chi2_sf",
    "chi2_logsf",
    "chi2_quantile",
    "binomial_tail",
    "log_binomial_tail",
]


@dataclass
class NormalityModel:
    means: np.ndarray
    variances: np.ndarray
    extractor: str = "pca"
    scale_index: int = 0
    channel_index: int = 0

    @property
    def num_features(self) -> int:
        return self.means.size

    @property
    def degrees_of_freedom(self) -> int:
        return self.means.size


@dataclass
class DistanceMap:
    d2: np.ndarray
    df: float
    independence_length: float = 1.0
    scale_index: int = 0
    channel_index: int = 0
    component: int = -1  # -1: joint map over all features
    margin: int = 0  # edge pixels that repeat an inner test (clamp border)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d2.shape


def variance_floor(variances: np.ndarray) -> float:
    return max(1e-12, 1e-9 * float(np.mean(variances)))


def fit_normality(stack: FeatureStack) -> NormalityModel:
    """Per-plane mean and (floored) variance over all pixels."""
    planes = stack.planes.reshape(stack.num_features, -1)
    means = planes.mean(axis=1)
    variances = planes.var(axis=1)
    variances = np.maximum(variances, variance_floor(variances))
    return NormalityModel(means, variances, extractor=stack.extractor,
                          scale_index=stack.scale_index,
                          channel_index=stack.channel_index)


def _standardized_sq(stack: FeatureStack, model: NormalityModel) -> np.ndarray:
    if stack.num_features != model.num_features:
        raise ValueError(
            f"stack has {stack.num_features} features, model expects {model.num_features}")
    diff = stack.planes - model.means[:, None, None]
    return diff * diff / model.variances[:, None, None]


def mahalanobis_map(stack: FeatureStack, model: NormalityModel) -> DistanceMap:
    """Joint squared distance to normality, chi-square with ``m`` dof under H0."""
    z2 = _standardized_sq(stack, model)
    return DistanceMap(z2.sum(axis=0), df=model.num_features,
                       independence_length=stack.independence_length,
                       scale_index=stack.scale_index,
                       channel_index=stack.channel_index, margin=stack.margin)


def component_maps(stack: FeatureStack, model: NormalityModel) -> list[DistanceMap]:
    """One single-dof distance map per feature plane."""
    z2 = _standardized_sq(stack, model)
    return [DistanceMap(z2[i], df=1, independence_length=stack.independence_length,
                        scale_index=stack.scale_index,
                        channel_index=stack.channel_index, component=i,
                        margin=stack.margin)
            for i in range(z2.shape[0])]
