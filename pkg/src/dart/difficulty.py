"""Image difficulty scoring.

A difficulty score in [0, 1] summarises how visually complex an image is,
fusing three cues: edge density, pixel variance, and gradient complexity.
Harder images should be routed to deeper exits, so the score feeds directly
into the threshold adjustment of the exit policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Rec. 601 luma weights, in RGB order.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImagePlane:
    """A decoded image: float intensities in [0, 1], shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        if px.ndim != 3:
            raise ValueError(f"expected 2-D or 3-D pixel array, got {px.ndim}-D")
        h, w, c = px.shape
        if h < 1 or w < 1:
            raise ValueError(f"empty image: {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"unsupported channel count {c}, expected 1 or 3")
        if not np.isfinite(px).all():
            raise ValueError("non-finite pixel intensity")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel intensity out of range [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class DifficultyWeights:
    """Fusion weights; must be non-negative and sum to 1."""

    edge: float = 0.4
    variance: float = 0.3
    gradient: float = 0.3

    def __post_init__(self) -> None:
        w = (self.edge, self.variance, self.gradient)
        if any(v < 0.0 for v in w):
            raise ValueError(f"negative weight in {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights {w} sum to {sum(w)}, expected 1")


@dataclass(frozen=True)
class DifficultyScore:
    """Per-component scores plus the fused value, all in [0, 1]."""

    edge: float
    variance: float
    gradient: float
    fused: float
    weights: DifficultyWeights = field(default_factory=DifficultyWeights)


def to_grayscale(image: ImagePlane) -> ImagePlane:
    """Collapse an RGB image to one luma channel; single-channel input passes through."""
    if image.channels == 1:
        return image
    luma = image.pixels @ _LUMA
    # Weights sum to 1 so the result stays in [0, 1] up to float rounding.
    return ImagePlane(np.clip(luma, 0.0, 1.0))


def sobel_magnitude(image: ImagePlane) -> np.ndarray:
    """Gradient magnitude field sqrt(Gx^2 + Gy^2) of a single-channel image.

    Borders clamp to the nearest pixel.  Each derivative is computed as a
    difference of identically-shaped smoothed columns (or rows), so constant
    images yield exact zeros rather than summation residue.
    """
    if image.channels != 1:
        raise ValueError("sobel_magnitude expects a single-channel image")
    p = np.pad(image.pixels[:, :, 0], 1, mode="edge")
    east = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
    west = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    south = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
    north = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    return np.hypot(east - west, south - north)


def laplacian_response(image: ImagePlane) -> np.ndarray:
    """Laplacian field of a single-channel image (4-neighbour kernel, clamped borders).

    Written as a sum of neighbour-minus-centre differences so constant images
    yield exact zeros.
    """
    if image.channels != 1:
        raise ValueError("laplacian_response expects a single-channel image")
    c = image.pixels[:, :, 0]
    p = np.pad(c, 1, mode="edge")
    return ((p[:-2, 1:-1] - c) + (p[2:, 1:-1] - c)
            + (p[1:-1, :-2] - c) + (p[1:-1, 2:] - c))


def edge_density(gradient_magnitude: np.ndarray, k: float = 1.0) -> float:
    """Fraction of pixels whose gradient magnitude exceeds mean + k * stddev.

    The threshold adapts to the field itself, so a constant field (stddev 0)
    has no pixel strictly above the threshold and scores 0.
    """
    g = np.asarray(gradient_magnitude, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty gradient field")
    threshold = g.mean() + k * g.std()
    return float(np.count_nonzero(g > threshold) / g.size)


def pixel_variance(image: ImagePlane) -> float:
    """Channel-averaged intensity variance, scaled so 0.25 (the max for [0,1] data) maps to 1.

    Each channel is shifted by its own first pixel before the variance (a
    no-op mathematically) so constant images score exactly 0.
    """
    shifted = image.pixels - image.pixels[0:1, 0:1, :]
    per_channel = shifted.var(axis=(0, 1))
    return min(float(per_channel.mean()) / 0.25, 1.0)


def gradient_complexity(image: ImagePlane) -> float:
    """Mean absolute Laplacian response, scaled by its 1/4 maximum and clamped to 1."""
    response = np.abs(laplacian_response(image))
    return min(float(response.mean()) / 4.0, 1.0)


def fuse_components(edge: float, variance: float, gradient: float,
                    weights: DifficultyWeights) -> float:
    """Weighted sum of the three component scores."""
    for name, v in (("edge", edge), ("variance", variance), ("gradient", gradient)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} component {v} outside [0, 1]")
    return weights.edge * edge + weights.variance * variance + weights.gradient * gradient


def difficulty(image: ImagePlane, weights: DifficultyWeights | None = None,
               edge_k: float = 1.0) -> DifficultyScore:
    """Score one image.

    Edge density and gradient complexity are computed on the luma channel;
    pixel variance sees the original channels so colour texture still counts.
    """
    if weights is None:
        weights = DifficultyWeights()
    gray = to_grayscale(image)
    edge = edge_density(sobel_magnitude(gray), k=edge_k)
    variance = pixel_variance(image)
    gradient = gradient_complexity(gray)
    fused = fuse_components(edge, variance, gradient, weights)
    return DifficultyScore(edge=edge, variance=variance, gradient=gradient,
                           fused=fused, weights=weights)
