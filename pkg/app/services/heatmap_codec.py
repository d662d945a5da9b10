"""Gaussian heatmap targets, keypoint decoding and box <-> input affine maps.

Two decoders are exposed and never mixed implicitly:
  quarter -- integer argmax plus a 0.25 px shift toward the larger neighbour
  dark    -- Gaussian modulation, log, then one Newton step on the log-heatmap
"""
import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
DECODE_METHODS = ("dark", "quarter")


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = settings.HEATMAP_SIGMA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"gaussian sigma must be > 0, got {self.sigma}")

    @property
    def radius(self) -> int:
        return int(math.ceil(3 * self.sigma))


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    fallback: bool = False  # dark decode fell back to the quarter-offset result


@dataclass(frozen=True)
class PersonBox:
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0) or not all(map(math.isfinite, (self.cx, self.cy))):
            raise ConfigError(f"degenerate person box {self.width}x{self.height} at ({self.cx}, {self.cy})")


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping image coordinates to model-input coordinates."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ConfigError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise ConfigError("affine transform is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def _check_maps(maps: np.ndarray, min_extent: int) -> np.ndarray:
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ConfigError(f"heatmap set must be (K, h, w), got shape {maps.shape}")
    if maps.shape[1] < min_extent or maps.shape[2] < min_extent:
        raise ConfigError(f"heatmaps must be at least {min_extent}x{min_extent}, got {maps.shape[1]}x{maps.shape[2]}")
    return maps


def encode_gaussian_targets(kps, size: tuple[int, int], g: GaussianSpec = GaussianSpec()) -> np.ndarray:
    """One unnormalised Gaussian per visible keypoint; peak 1 at the sub-pixel centre."""
    hh, ww = size
    if hh < 1 or ww < 1:
        raise ConfigError(f"heatmap size must be positive, got {size}")
    vv, uu = np.mgrid[0:hh, 0:ww].astype(np.float64)
    maps = np.zeros((len(kps), hh, ww), dtype=np.float32)
    for k, (x, y, visible) in enumerate(kps):
        if not visible:
            continue
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ConfigError(f"keypoint {k}: non-finite centre ({x}, {y})")
        maps[k] = np.exp(-((uu - x) ** 2 + (vv - y) ** 2) / (2 * g.sigma ** 2))
    return maps


def _argmax(hm: np.ndarray) -> tuple[int, int]:
    idx = int(np.argmax(hm))  # first maximum in row-major order
    return divmod(idx, hm.shape[1])


def _quarter(hm: np.ndarray) -> Keypoint:
    h, w = hm.shape
    py, px = _argmax(hm)
    x, y = float(px), float(py)
    if 0 < px < w - 1:
        x += 0.25 * np.sign(hm[py, px + 1] - hm[py, px - 1])
    if 0 < py < h - 1:
        y += 0.25 * np.sign(hm[py + 1, px] - hm[py - 1, px])
    return Keypoint(x, y, float(np.clip(hm[py, px], 0.0, 1.0)))


def decode_argmax_quarter(maps: np.ndarray) -> list[Keypoint]:
    maps = _check_maps(maps, 2)
    return [_quarter(hm) for hm in maps]


def modulate(hm: np.ndarray, g: GaussianSpec) -> np.ndarray:
    """Gaussian-smooth one map over a zero border and restore its original peak."""
    r = g.radius
    peak = float(np.max(hm))
    padded = np.zeros((hm.shape[0] + 2 * r, hm.shape[1] + 2 * r), dtype=np.float64)
    padded[r:-r, r:-r] = hm
    smoothed = cv2.GaussianBlur(padded, (2 * r + 1, 2 * r + 1), g.sigma)[r:-r, r:-r]
    top = float(np.max(smoothed))
    if top > 0:
        smoothed = smoothed * (peak / top)
    return smoothed


def _taylor(hm: np.ndarray, g: GaussianSpec) -> Keypoint:
    h, w = hm.shape
    py, px = _argmax(hm)
    fallback = _quarter(hm)
    if not (1 <= px <= w - 2 and 1 <= py <= h - 2):
        return Keypoint(fallback.x, fallback.y, fallback.score, True)

    f = np.log(np.maximum(modulate(hm.astype(np.float64), g), LOG_FLOOR))
    dx = 0.5 * (f[py, px + 1] - f[py, px - 1])
    dy = 0.5 * (f[py + 1, px] - f[py - 1, px])
    dxx = f[py, px + 1] - 2 * f[py, px] + f[py, px - 1]
    dyy = f[py + 1, px] - 2 * f[py, px] + f[py - 1, px]
    dxy = 0.25 * (f[py + 1, px + 1] - f[py - 1, px + 1] - f[py + 1, px - 1] + f[py - 1, px - 1])
    det = dxx * dyy - dxy * dxy
    if not (dxx < 0 and dyy < 0 and det != 0):
        return Keypoint(fallback.x, fallback.y, fallback.score, True)

    hessian = np.array([[dxx, dxy], [dxy, dyy]])
    offset = -np.linalg.solve(hessian, np.array([dx, dy]))
    return Keypoint(px + float(offset[0]), py + float(offset[1]), fallback.score)


def decode_dark(maps: np.ndarray, g: GaussianSpec = GaussianSpec()) -> list[Keypoint]:
    maps = _check_maps(maps, 3)
    return [_taylor(hm, g) for hm in maps]


def decode_batch(heatmaps: np.ndarray, method: str = "dark", g: GaussianSpec = GaussianSpec()) -> list[list[Keypoint]]:
    """Decode an (n, K, h, w) stack, one keypoint list per person."""
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim != 4:
        raise ConfigError(f"heatmap batch must be (n, K, h, w), got shape {heatmaps.shape}")
    if method not in DECODE_METHODS:
        raise ConfigError(f"unknown decode method '{method}', expected one of {DECODE_METHODS}")
    decoded = [decode_dark(m, g) if method == "dark" else decode_argmax_quarter(m) for m in heatmaps]
    fallbacks = sum(kp.fallback for person in decoded for kp in person)
    logger.info(f"Decode [{method}] persons={len(decoded)} sigma={g.sigma} fallbacks={fallbacks}")
    return decoded


def box_to_input_transform(b: PersonBox, input_size: tuple[int, int], margin: float = settings.BOX_MARGIN) -> AffineTransform:
    """Affine map from the margin-expanded, aspect-corrected box onto [0, w) x [0, h)."""
    if margin < 1:
        raise ConfigError(f"box margin must be >= 1, got {margin}")
    in_h, in_w = input_size
    if in_h <= 0 or in_w <= 0:
        raise ConfigError(f"input size must be positive, got {input_size}")
    aspect = in_w / in_h
    width, height = b.width, b.height
    if width > aspect * height:
        height = width / aspect
    else:
        width = height * aspect
    width *= margin
    height *= margin
    sx = in_w / width
    sy = in_h / height
    matrix = np.array([
        [sx, 0.0, in_w / 2 - sx * b.cx],
        [0.0, sy, in_h / 2 - sy * b.cy],
    ])
    return AffineTransform(matrix)


def invert_affine(t: AffineTransform) -> AffineTransform:
    return AffineTransform(cv2.invertAffineTransform(t.matrix))


def apply_affine(t: AffineTransform, points: np.ndarray) -> np.ndarray:
    """Map an (N, 2) array of (x, y) points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ t.matrix[:, :2].T + t.matrix[:, 2]


def heatmap_to_image_coords(kps: list[Keypoint], t: AffineTransform, stride: int = settings.HEATMAP_STRIDE) -> list[Keypoint]:
    """Heatmap cell centres -> input pixel centres -> image coordinates."""
    if not kps:
        return []
    offset = stride / 2 - 0.5
    pts = np.array([[stride * kp.x + offset, stride * kp.y + offset] for kp in kps])
    image_pts = apply_affine(invert_affine(t), pts)
    return [Keypoint(float(x), float(y), kp.score, kp.fallback) for (x, y), kp in zip(image_pts, kps)]
