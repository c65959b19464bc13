"""Bounding-box arithmetic and search-region geometry.

Boxes are ``(x, y, w, h)`` in continuous frame pixels, where ``(x, y)`` is the
top-left corner. Pixel ``i`` covers the interval ``[i, i + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w >= 0 and self.h >= 0):
            raise ValueError(f"box size must be non-negative, got w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        x, y, w, h = (float(v) for v in a)
        return cls(x, y, w, h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def scale_about_center(self, factor: float) -> "Box":
        return Box.from_center(self.cx, self.cy, self.w * factor, self.h * factor)


@dataclass(frozen=True)
class PerturbConfig:
    max_shift_frac: float = 0.3
    max_log_scale: float = 0.25

    def __post_init__(self):
        if self.max_shift_frac < 0 or self.max_log_scale < 0:
            raise ValueError("perturbation magnitudes must be non-negative")


@dataclass(frozen=True)
class CropSpec:
    """Square window of ``side`` frame pixels centred on ``center``, resampled
    to ``output_resolution`` pixels. ``frame_size`` is ``(width, height)``."""

    center: tuple[float, float]
    side: float
    output_resolution: int
    frame_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"crop side must be positive, got {self.side}")

    @property
    def scale(self) -> float:
        """Crop pixels per frame pixel."""
        return self.output_resolution / self.side

    @property
    def origin(self) -> tuple[float, float]:
        return (self.center[0] - self.side / 2, self.center[1] - self.side / 2)

    def frame_to_crop(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        ox, oy = self.origin
        return (pts - np.array([ox, oy])) * self.scale

    def crop_to_frame(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        ox, oy = self.origin
        return pts / self.scale + np.array([ox, oy])

    def box_to_crop(self, box: Box) -> Box:
        ox, oy = self.origin
        s = self.scale
        return Box((box.x - ox) * s, (box.y - oy) * s, box.w * s, box.h * s)

    def box_to_frame(self, box: Box) -> Box:
        ox, oy = self.origin
        s = self.scale
        return Box(box.x / s + ox, box.y / s + oy, box.w / s, box.h / s)

    def boxes_to_frame(self, boxes: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`box_to_frame` for an ``(..., 4)`` array."""
        boxes = np.asarray(boxes, dtype=np.float64)
        ox, oy = self.origin
        s = self.scale
        out = boxes / s
        out[..., 0] += ox
        out[..., 1] += oy
        return out

    def affine(self) -> np.ndarray:
        """2x3 matrix taking crop pixel indices to frame pixel indices.

        Pixel centres sit at ``index + 0.5`` in continuous coordinates, so the
        index-space map is ``src = origin + (dst + 0.5) / scale - 0.5``.
        """
        ox, oy = self.origin
        inv = 1.0 / self.scale
        return np.array(
            [[inv, 0.0, ox + 0.5 * inv - 0.5], [0.0, inv, oy + 0.5 * inv - 0.5]],
            dtype=np.float64,
        )

    def extract(self, image: np.ndarray, fill=None) -> np.ndarray:
        """Resample the crop from ``image``; out-of-frame pixels take ``fill``
        (per-channel mean colour of the image when ``None``)."""
        channels = image.shape[-1] if image.ndim == 3 else 1
        if fill is None:
            fill = cv2.mean(image)[:channels]
        fill = tuple(float(v) for v in np.broadcast_to(fill, (channels,)))
        r = self.output_resolution
        return cv2.warpAffine(
            image,
            self.affine(),
            (r, r),
            flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=fill,
        )


def _corners(b: Box):
    return b.x, b.y, b.x + b.w, b.y + b.h


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the same corner differences, so iou(a, a) is exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def giou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if hull <= 0:
        return 0.0
    overlap = inter / union if union > 0 else 0.0
    return overlap - (hull - union) / hull


def center_distance(a: Box, b: Box) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def perturb(g: Box, cfg: PerturbConfig, rng: np.random.Generator) -> Box:
    """Random jitter of a ground-truth box, used as the stand-in for the
    previous prediction in frame-level training."""
    if cfg.max_shift_frac == 0 and cfg.max_log_scale == 0:
        return g
    sx, sy = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac, size=2)
    lw, lh = rng.uniform(-cfg.max_log_scale, cfg.max_log_scale, size=2)
    cx = g.cx + sx * g.w
    cy = g.cy + sy * g.h
    return Box.from_center(cx, cy, g.w * math.exp(lw), g.h * math.exp(lh))


def context_side(w: float, h: float, context_factor: float) -> float:
    p = (w + h) / 2
    return context_factor * math.sqrt((w + p) * (h + p))


def search_region(
    prev: Box,
    context_factor: float,
    frame_w: int,
    frame_h: int,
    output_resolution: int = 128,
) -> CropSpec:
    if not prev.area > 0:
        raise ValueError(f"search region needs a positive-area box, got {prev}")
    side = context_side(prev.w, prev.h, context_factor)
    return CropSpec((prev.cx, prev.cy), side, output_resolution, (int(frame_w), int(frame_h)))


def clip_box(b: Box, frame_w: float, frame_h: float) -> Box:
    x1 = min(max(b.x, 0.0), frame_w)
    y1 = min(max(b.y, 0.0), frame_h)
    x2 = min(max(b.x + b.w, 0.0), frame_w)
    y2 = min(max(b.y + b.h, 0.0), frame_h)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        return Box(x1, y1, 0.0, 0.0)
    return Box(x1, y1, w, h)


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two ``(..., 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax2, ay2 = a[..., 0] + a[..., 2], a[..., 1] + a[..., 3]
    bx2, by2 = b[..., 0] + b[..., 2], b[..., 1] + b[..., 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (ax2 - a[..., 0]) * (ay2 - a[..., 1]) + (bx2 - b[..., 0]) * (by2 - b[..., 1]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)
