"""Pixel-grid geometry: integer boxes, polygon rasterization, run-length masks.

Bitmaps are ``numpy`` boolean arrays of shape ``(height, width)`` indexed
``[y, x]``.  Run-length counts walk the grid column-major (column 0 top to
bottom, then column 1, ...) and always start with a background run, which
may be zero-length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry input (size mismatch, bad counts, non-finite vertex)."""


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self) -> None:
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"box extents must be non-negative, got w={self.w} h={self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def clamp(self, size: ImageSize) -> "BoundingBox":
        x1 = min(max(self.x, 0), size.width)
        y1 = min(max(self.y, 0), size.height)
        x2 = min(max(self.x2, 0), size.width)
        y2 = min(max(self.y2, 0), size.height)
        return BoundingBox(x1, y1, max(0, x2 - x1), max(0, y2 - y1))

    def to_bitmap(self, size: ImageSize) -> np.ndarray:
        b = self.clamp(size)
        out = np.zeros((size.height, size.width), dtype=bool)
        out[b.y : b.y2, b.x : b.x2] = True
        return out

    def to_mask(self, size: ImageSize) -> "RleMask":
        return encode(self.to_bitmap(size))

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0, min(a.x2, b.x2) - max(a.x, b.x))
    ih = max(0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = iw * ih
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def bitmap_bbox(bitmap: np.ndarray) -> BoundingBox:
    """Tightest integer box around the foreground; zero box for an empty bitmap."""
    ys = np.flatnonzero(bitmap.any(axis=1))
    xs = np.flatnonzero(bitmap.any(axis=0))
    if ys.size == 0:
        return BoundingBox(0, 0, 0, 0)
    return BoundingBox(int(xs[0]), int(ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1))


@dataclass(frozen=True)
class PolygonRegion:
    rings: tuple[tuple[tuple[float, float], ...], ...]
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        if self.image_w <= 0 or self.image_h <= 0:
            raise GeometryError("polygon image size must be positive")
        for ring in self.rings:
            if len(ring) < 3:
                raise GeometryError(f"polygon ring needs >= 3 vertices, got {len(ring)}")
            for vx, vy in ring:
                if not (math.isfinite(vx) and math.isfinite(vy)):
                    raise GeometryError(f"non-finite polygon vertex ({vx}, {vy})")

    @classmethod
    def from_flat(cls, flat_rings: Iterable[Sequence[float]], image_w: int, image_h: int) -> "PolygonRegion":
        """Build from COCO-style flat coordinate lists ``[x0, y0, x1, y1, ...]``."""
        rings = []
        for flat in flat_rings:
            if len(flat) % 2:
                raise GeometryError("flat polygon has an odd number of coordinates")
            rings.append(tuple((float(flat[i]), float(flat[i + 1])) for i in range(0, len(flat), 2)))
        return cls(tuple(rings), image_w, image_h)

    def to_flat(self) -> list[list[float]]:
        return [[c for v in ring for c in v] for ring in self.rings]

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.image_w, self.image_h)


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("mask size must be positive")
        if any(c < 0 for c in self.counts):
            raise GeometryError("run lengths must be non-negative")
        if sum(self.counts) != self.width * self.height:
            raise GeometryError(
                f"run lengths sum to {sum(self.counts)}, expected {self.width * self.height}"
            )
        if any(c == 0 for c in self.counts[1:]):
            raise GeometryError("only the first run may be zero-length")

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.width, self.height)

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        h, w = obj["size"]
        return cls(int(w), int(h), tuple(int(c) for c in obj["counts"]))

    @classmethod
    def empty(cls, size: ImageSize) -> "RleMask":
        return cls(size.width, size.height, (size.area,))

    @classmethod
    def full(cls, size: ImageSize) -> "RleMask":
        return cls(size.width, size.height, (0, size.area))


def encode(bitmap: np.ndarray) -> RleMask:
    bitmap = np.asarray(bitmap, dtype=bool)
    if bitmap.ndim != 2:
        raise GeometryError(f"bitmap must be 2-D, got shape {bitmap.shape}")
    h, w = bitmap.shape
    flat = bitmap.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return RleMask(w, h, tuple(int(r) for r in runs))


def decode(mask: RleMask) -> np.ndarray:
    values = np.zeros(len(mask.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.counts)
    return flat.reshape((mask.height, mask.width), order="F")


def rasterize(polygon: PolygonRegion) -> RleMask:
    return encode(rasterize_bitmap(polygon))


def rasterize_bitmap(polygon: PolygonRegion) -> np.ndarray:
    """Even-odd fill sampled at pixel centers ``(x + 0.5, y + 0.5)``.

    Scanline form: for each row the edge crossings are collected once; a
    pixel is inside iff an odd number of crossings lie strictly to the right
    of its center.
    """
    w, h = polygon.image_w, polygon.image_h
    out = np.zeros((h, w), dtype=bool)
    edges = []
    for ring in polygon.rings:
        pts = np.asarray(ring, dtype=np.float64)
        nxt = np.roll(pts, -1, axis=0)
        edges.append(np.hstack([pts, nxt]))
    if not edges:
        return out
    e = np.vstack(edges)
    x0, y0, x1, y1 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    # edges skipped when horizontal; denominator below is then never used
    active_rows = np.flatnonzero(y0 != y1)
    xc = np.arange(w, dtype=np.float64) + 0.5
    lo = np.minimum(y0, y1)
    hi = np.maximum(y0, y1)
    row_min = max(0, int(math.floor(lo[active_rows].min() - 0.5))) if active_rows.size else h
    row_max = min(h, int(math.ceil(hi[active_rows].max() + 0.5))) if active_rows.size else 0
    for y in range(row_min, row_max):
        yc = y + 0.5
        hit = (y0 > yc) != (y1 > yc)
        if not hit.any():
            continue
        xs = (x1[hit] - x0[hit]) * (yc - y0[hit]) / (y1[hit] - y0[hit]) + x0[hit]
        xs.sort()
        right = xs.size - np.searchsorted(xs, xc, side="right")
        out[y] = (right & 1).astype(bool)
    return out


def _same_size(masks: Sequence[RleMask]) -> ImageSize:
    if not masks:
        raise GeometryError("need at least one mask")
    first = masks[0]
    for m in masks[1:]:
        if (m.width, m.height) != (first.width, first.height):
            raise GeometryError(
                f"mask size mismatch: {first.width}x{first.height} vs {m.width}x{m.height}"
            )
    return first.size


def mask_area(mask: RleMask) -> int:
    return mask.area


def intersection_union(a: RleMask, b: RleMask) -> tuple[int, int]:
    """Exact integer intersection and union pixel counts."""
    _same_size([a, b])
    da, db = decode(a), decode(b)
    inter = int(np.count_nonzero(da & db))
    return inter, a.area + b.area - inter


def mask_iou(a: RleMask, b: RleMask) -> float:
    inter, union = intersection_union(a, b)
    if union == 0:
        return 0.0
    return inter / union


def mask_union(masks: Sequence[RleMask]) -> RleMask:
    _same_size(masks)
    if len(masks) == 1:
        return masks[0]
    acc = decode(masks[0]).copy()
    for m in masks[1:]:
        acc |= decode(m)
    return encode(acc)


def mask_intersection(masks: Sequence[RleMask]) -> RleMask:
    _same_size(masks)
    acc = decode(masks[0]).copy()
    for m in masks[1:]:
        acc &= decode(m)
    return encode(acc)


def resize_bitmap(bitmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample; destination pixel centers map back to source pixels."""
    src_h, src_w = bitmap.shape
    ys = np.minimum(((np.arange(height) + 0.5) * src_h / height).astype(int), src_h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * src_w / width).astype(int), src_w - 1)
    return bitmap[np.ix_(ys, xs)]


def resize_mask(mask: RleMask, size: ImageSize) -> RleMask:
    if (mask.width, mask.height) == (size.width, size.height):
        return mask
    return encode(resize_bitmap(decode(mask), size.height, size.width))
