"""Image, mask and geometry value types plus raster I/O.

Coordinates are continuous with pixel ``(i, j)`` (column ``i``, row ``j``)
covering the unit square ``[i, i+1) x [j, j+1)``; its center sits at
``(i + 0.5, j + 0.5)``. Arrays are indexed ``[row, column]``.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidGeometry, ShapeMismatch, ValidationError

MIN_PIPELINE_SIDE = 16


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Grayscale ``(h, w)`` or RGB ``(h, w, 3)`` float image in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ValidationError(f"unsupported image shape {arr.shape}")
        if arr.size == 0:
            raise ValidationError("empty image")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def require_pipeline_size(self) -> None:
        if self.width < MIN_PIPELINE_SIDE or self.height < MIN_PIPELINE_SIDE:
            raise ValidationError(
                f"image {self.width}x{self.height} is below the "
                f"{MIN_PIPELINE_SIDE}x{MIN_PIPELINE_SIDE} minimum")

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class BitMask:
    """Boolean ``(h, w)`` pixel mask."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "bits", _frozen(arr))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __and__(self, other: "BitMask") -> "BitMask":
        _check_same_shape(self, other)
        return BitMask(self.bits & other.bits)

    def __sub__(self, other: "BitMask") -> "BitMask":
        _check_same_shape(self, other)
        return BitMask(self.bits & ~other.bits)

    def __eq__(self, other):
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and np.array_equal(self.bits, other.bits)


def _check_same_shape(a: BitMask, b: BitMask) -> None:
    if a.bits.shape != b.bits.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def to_dict(self) -> dict:
        return {"cx": float(self.cx), "cy": float(self.cy), "r": float(self.r)}

    def contains(self, x: float, y: float) -> bool:
        return (x - self.cx) ** 2 + (y - self.cy) ** 2 <= self.r ** 2


@dataclass(frozen=True, eq=False)
class Contour:
    """Implicitly closed polygon of ``(x, y)`` points, shape ``(n, 2)``."""

    points: np.ndarray = field()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"contour points must be (n, 2), got {pts.shape}")
        if len(pts) < 8:
            raise ValidationError("contour needs at least 8 points")
        object.__setattr__(self, "points", _frozen(pts))

    def area(self) -> float:
        return polygon_area(self.points)

    def __len__(self):
        return len(self.points)


def polygon_area(points: np.ndarray) -> float:
    """Unsigned shoelace area of a closed polygon."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize_circle(c: Circle, w: int, h: int) -> BitMask:
    """Set every pixel whose center lies inside (or on) the circle."""
    if not c.r > 0:
        raise InvalidGeometry(f"circle radius must be positive, got {c.r}")
    xs = np.arange(w) + 0.5 - c.cx
    ys = np.arange(h) + 0.5 - c.cy
    return BitMask(ys[:, None] ** 2 + xs[None, :] ** 2 <= c.r ** 2)


def annulus_mask(outer: Circle, inner: Circle, w: int, h: int) -> BitMask:
    """Pixels inside ``outer`` but not inside ``inner``."""
    if inner.r >= outer.r:
        raise InvalidGeometry(
            f"inner radius {inner.r} must be smaller than outer radius {outer.r}")
    if np.hypot(inner.cx - outer.cx, inner.cy - outer.cy) > outer.r:
        raise InvalidGeometry("inner circle center lies outside the outer circle")
    return rasterize_circle(outer, w, h) - rasterize_circle(inner, w, h)


def circle_points(c: Circle, n: int) -> np.ndarray:
    t = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([c.cx + c.r * np.cos(t), c.cy + c.r * np.sin(t)])


# -- I/O ---------------------------------------------------------------------

def load_image(path: str | os.PathLike) -> RasterImage:
    """Read PNG/PGM/PPM into a normalized RasterImage."""
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if arr.max(initial=0) > 255 or mode.startswith("I;16") else 255.0
            return RasterImage(np.clip(arr / scale, 0.0, 1.0))
        if mode == "L":
            return RasterImage(np.asarray(im, dtype=np.float64) / 255.0)
        if mode == "1":
            return RasterImage(np.asarray(im, dtype=np.float64))
        rgb = im.convert("RGB")
        return RasterImage(np.asarray(rgb, dtype=np.float64) / 255.0)


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)


def _atomic_save(pil_image: Image.Image, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = fmt or _format_for(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    os.close(fd)
    try:
        pil_image.save(tmp, format=fmt)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_for(path: Path) -> str:
    ext = path.suffix.lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return "PPM"
    if ext == ".png":
        return "PNG"
    raise ValidationError(f"unsupported image extension {ext!r}")


def save_image(img: RasterImage | np.ndarray, path: str | os.PathLike) -> None:
    data = img.data if isinstance(img, RasterImage) else np.asarray(img)
    arr = to_uint8(data)
    path = Path(path)
    if path.suffix.lower() == ".pgm" and arr.ndim == 3:
        raise ValidationError("PGM output requires a grayscale image")
    if path.suffix.lower() == ".ppm" and arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    _atomic_save(Image.fromarray(arr), path)


def load_mask(path: str | os.PathLike) -> BitMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BitMask(arr > 127)


def save_mask(mask: BitMask, path: str | os.PathLike) -> None:
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    _atomic_save(Image.fromarray(arr), path)
