"""The 31-component contour + texture descriptor of a segmented COC.

Indices 1-15 are contour features derived from the two fitted circles and
the cumulus annulus between them; 16-31 are texture features (gradient,
Laplacian of Gaussian, uniform LBP and Haar-like responses).
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, asdict
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyRegion, InvalidData, InvalidParams, ValidationError
from .grades import Grade
from .preprocess import as_gray, gradient_array, laplacian_of_gaussian
from .raster import RasterImage
from .segmentation import Segmentation

EPS = 1e-9
N_FEATURES = 31
LAYOUT_VERSION = "coc31-v1"


class FeatureSpec(NamedTuple):
    name: str
    group: str
    region: str


LAYOUT: tuple[FeatureSpec, ...] = (
    FeatureSpec("outer_radius", "contour", "cell"),
    FeatureSpec("nucleus_radius", "contour", "nucleus"),
    FeatureSpec("radius_ratio", "contour", "cell"),
    FeatureSpec("cell_area_fraction", "contour", "global"),
    FeatureSpec("nucleus_area_ratio", "contour", "cell"),
    FeatureSpec("border_distance", "contour", "global"),
    FeatureSpec("annulus_mean", "contour", "annulus"),
    FeatureSpec("annulus_std", "contour", "annulus"),
    FeatureSpec("nucleus_mean", "contour", "nucleus"),
    FeatureSpec("nucleus_std", "contour", "nucleus"),
    FeatureSpec("nucleus_annulus_ratio", "contour", "cell"),
    FeatureSpec("edge_component_density", "contour", "annulus"),
    FeatureSpec("edge_component_mean_size", "contour", "annulus"),
    FeatureSpec("edge_component_max_size", "contour", "annulus"),
    FeatureSpec("edge_density", "contour", "annulus"),
    FeatureSpec("gradient_mean", "texture", "annulus"),
    FeatureSpec("gradient_std", "texture", "annulus"),
    FeatureSpec("log_small_mean", "texture", "annulus"),
    FeatureSpec("log_small_std", "texture", "annulus"),
    FeatureSpec("log_large_mean", "texture", "annulus"),
    FeatureSpec("log_large_std", "texture", "annulus"),
    FeatureSpec("lbp_energy_annulus", "texture", "annulus"),
    FeatureSpec("lbp_entropy_annulus", "texture", "annulus"),
    FeatureSpec("lbp_energy_cell", "texture", "cell"),
    FeatureSpec("lbp_entropy_cell", "texture", "cell"),
    FeatureSpec("haar_two_horizontal", "texture", "global"),
    FeatureSpec("haar_two_vertical", "texture", "global"),
    FeatureSpec("haar_two_horizontal_half", "texture", "global"),
    FeatureSpec("haar_two_vertical_half", "texture", "global"),
    FeatureSpec("haar_three_horizontal", "texture", "global"),
    FeatureSpec("haar_checkerboard", "texture", "global"),
)
assert len(LAYOUT) == N_FEATURES

CONTOUR_COLUMNS = tuple(i for i, f in enumerate(LAYOUT) if f.group == "contour")
TEXTURE_COLUMNS = tuple(i for i, f in enumerate(LAYOUT) if f.group == "texture")
COLUMN_NAMES = tuple(f"f{i + 1:02d}" for i in range(N_FEATURES))


@dataclass(frozen=True)
class FeatureParams:
    log_sigmas: tuple[float, float] = (2.0, 4.0)
    haar_window_factor: float = 2.0  # window side = factor * outer radius

    def __post_init__(self):
        object.__setattr__(self, "log_sigmas", tuple(float(s) for s in self.log_sigmas))
        if len(self.log_sigmas) != 2 or min(self.log_sigmas) <= 0:
            raise InvalidParams("log_sigmas must be two positive scales")
        if not self.haar_window_factor > 0:
            raise InvalidParams("haar_window_factor must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_sigmas"] = list(self.log_sigmas)
        return d


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    layout_version: str = LAYOUT_VERSION

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (N_FEATURES,):
            raise InvalidData(f"feature vector must have {N_FEATURES} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidData("feature vector contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.layout_version == other.layout_version and np.array_equal(self.values, other.values)

    def as_dict(self) -> dict:
        return {spec.name: float(x) for spec, x in zip(LAYOUT, self.values)}


# -- building blocks ---------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold; pixels strictly above are foreground."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[1:][int(np.argmax(between))])


# neighbor offsets (dx, dy), counterclockwise from east; bit k for offset k
LBP_OFFSETS = ((1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1))


def _transitions(code: int) -> int:
    bits = [(code >> k) & 1 for k in range(8)]
    return sum(bits[k] != bits[(k + 1) % 8] for k in range(8))


def _uniform_lut() -> np.ndarray:
    lut = np.full(256, 58, dtype=np.int64)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    assert len(uniform) == 58
    for b, c in enumerate(uniform):
        lut[c] = b
    return lut


UNIFORM_LUT = _uniform_lut()
LBP_BINS = 59


def lbp_codes(arr: np.ndarray) -> np.ndarray:
    """8-neighbor radius-1 LBP code per pixel; bit set when neighbor >= center."""
    arr = np.asarray(arr, dtype=np.float64)
    padded = np.pad(arr, 1, mode="edge")
    h, w = arr.shape
    codes = np.zeros((h, w), dtype=np.int64)
    for k, (dx, dy) in enumerate(LBP_OFFSETS):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        codes |= (nb >= arr).astype(np.int64) << k
    return codes


def lbp_histogram(codes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalized 59-bin uniform-pattern histogram over ``mask``."""
    hist = np.bincount(UNIFORM_LUT[codes[mask]], minlength=LBP_BINS).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise EmptyRegion("LBP histogram over an empty region")
    return hist / total


def histogram_energy_entropy(p: np.ndarray) -> tuple[float, float]:
    nz = p[p > 0]
    return float(np.sum(p * p)), float(max(0.0, -np.sum(nz * np.log2(nz))))


class IntegralImage:
    def __init__(self, arr: np.ndarray):
        a = np.asarray(arr, dtype=np.float64)
        self.table = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        self.table[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)

    def box_sum(self, x0: int, y0: int, x1: int, y1: int) -> float:
        """Sum over columns ``[x0, x1)`` and rows ``[y0, y1)``."""
        t = self.table
        return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])

    def box_mean(self, x0, y0, x1, y1) -> float:
        n = (x1 - x0) * (y1 - y0)
        return self.box_sum(x0, y0, x1, y1) / n if n > 0 else 0.0


def _window(c: float, side: float, limit: int) -> tuple[int, int]:
    a = int(round(c - side / 2.0))
    b = int(round(c + side / 2.0))
    return max(0, a), min(limit, b)


def haar_responses(ii: IntegralImage, cx: float, cy: float, side: float,
                   w: int, h: int) -> list[float]:
    """Six Haar-like responses on windows centered at ``(cx, cy)``.

    Each response combines rectangle means with weights summing to zero,
    so it equals the signed rectangle-sum difference divided by the window
    area when the rectangles split the window evenly.
    """
    def two(side_, horizontal):
        x0, x1 = _window(cx, side_, w)
        y0, y1 = _window(cy, side_, h)
        if x1 - x0 < 2 or y1 - y0 < 2:
            return 0.0
        if horizontal:
            xm = (x0 + x1) // 2
            return 0.5 * (ii.box_mean(xm, y0, x1, y1) - ii.box_mean(x0, y0, xm, y1))
        ym = (y0 + y1) // 2
        return 0.5 * (ii.box_mean(x0, ym, x1, y1) - ii.box_mean(x0, y0, x1, ym))

    def three(side_):
        x0, x1 = _window(cx, side_, w)
        y0, y1 = _window(cy, side_, h)
        if x1 - x0 < 3 or y1 - y0 < 1:
            return 0.0
        xa = x0 + (x1 - x0) // 3
        xb = x0 + 2 * (x1 - x0) // 3
        left = ii.box_mean(x0, y0, xa, y1)
        mid = ii.box_mean(xa, y0, xb, y1)
        right = ii.box_mean(xb, y0, x1, y1)
        return (2.0 * mid - left - right) / 3.0

    def checker(side_):
        x0, x1 = _window(cx, side_, w)
        y0, y1 = _window(cy, side_, h)
        if x1 - x0 < 2 or y1 - y0 < 2:
            return 0.0
        xm, ym = (x0 + x1) // 2, (y0 + y1) // 2
        return 0.25 * (ii.box_mean(x0, y0, xm, ym) + ii.box_mean(xm, ym, x1, y1)
                       - ii.box_mean(xm, y0, x1, ym) - ii.box_mean(x0, ym, xm, y1))

    return [two(side, True), two(side, False), two(side / 2.0, True),
            two(side / 2.0, False), three(side), checker(side)]


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    return float(values.mean()), float(values.std())


# -- feature groups ----------------------------------------------------------

def _regions(seg: Segmentation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cell = seg.outer_mask.bits
    nucleus = seg.nucleus_mask.bits
    annulus = cell & ~nucleus
    if not annulus.any():
        raise EmptyRegion("the annulus between nucleus and cell boundary is empty")
    if not nucleus.any():
        raise EmptyRegion("the nucleus mask is empty")
    return cell, nucleus, annulus


def _gray(img: RasterImage) -> np.ndarray:
    return as_gray(img).data


def contour_features(img: RasterImage, seg: Segmentation) -> np.ndarray:
    """Features 1-15: geometry, regional intensity and annulus edge linking."""
    arr = _gray(img)
    h, w = arr.shape
    short = float(min(w, h))
    cell, nucleus, annulus = _regions(seg)
    outer, inner = seg.outer, seg.nucleus
    ann_area = float(annulus.sum())

    border = min(outer.cx - outer.r, w - outer.cx - outer.r, outer.cy - outer.r, h - outer.cy - outer.r)
    ann_mean, ann_std = _mean_std(arr[annulus])
    nuc_mean, nuc_std = _mean_std(arr[nucleus])

    grad = gradient_array(arr)
    g = grad[annulus]
    edges = annulus & (grad > otsu_threshold(g))
    labels, n_comp = ndimage.label(edges, structure=np.ones((3, 3), dtype=bool))
    if n_comp:
        sizes = np.bincount(labels.ravel())[1:].astype(np.float64)
        mean_size, max_size = sizes.mean(), sizes.max()
    else:
        mean_size = max_size = 0.0

    return np.array([
        outer.r / short,
        inner.r / short,
        inner.r / outer.r,
        cell.sum() / float(w * h),
        nucleus.sum() / float(cell.sum()),
        max(0.0, border) / (short / 2.0),
        ann_mean,
        ann_std,
        nuc_mean,
        nuc_std,
        nuc_mean / max(ann_mean, EPS),
        1000.0 * n_comp / ann_area,
        mean_size / ann_area,
        max_size / ann_area,
        edges.sum() / ann_area,
    ])


class TextureMaps:
    """Filter responses shared by every texture evaluation on one image."""

    def __init__(self, arr: np.ndarray, params: FeatureParams | None = None):
        params = params or FeatureParams()
        self.shape = arr.shape
        self.grad = gradient_array(arr)
        self.log_small = laplacian_of_gaussian(arr, params.log_sigmas[0])
        self.log_large = laplacian_of_gaussian(arr, params.log_sigmas[1])
        self.lbp = lbp_codes(arr)
        # Haar weights sum to zero, so centering loses nothing and keeps flat fields exact
        self.integral = IntegralImage(arr - np.median(arr))
        self.params = params

    def features(self, region: np.ndarray, cell: np.ndarray, center: tuple[float, float],
                 outer_r: float) -> np.ndarray:
        if not region.any() or not cell.any():
            raise EmptyRegion("texture region is empty")
        h, w = self.shape
        out = []
        for m in (self.grad, self.log_small, self.log_large):
            out.extend(_mean_std(m[region]))
        out.extend(histogram_energy_entropy(lbp_histogram(self.lbp, region)))
        out.extend(histogram_energy_entropy(lbp_histogram(self.lbp, cell)))
        side = self.params.haar_window_factor * outer_r
        out.extend(haar_responses(self.integral, center[0], center[1], side, w, h))
        return np.array(out)


def texture_features(img: RasterImage, seg: Segmentation,
                     params: FeatureParams | None = None) -> np.ndarray:
    """Features 16-31."""
    arr = _gray(img)
    cell, _, annulus = _regions(seg)
    maps = TextureMaps(arr, params)
    return maps.features(annulus, cell, (seg.nucleus.cx, seg.nucleus.cy), seg.outer.r)


def extract(img: RasterImage, seg: Segmentation, params: FeatureParams | None = None) -> FeatureVector:
    return FeatureVector(np.concatenate([contour_features(img, seg),
                                         texture_features(img, seg, params)]))


def local_feature_rows(img: RasterImage, seg: Segmentation, params: FeatureParams | None = None,
                       stride: int = 8, radius: float = 8.0) -> np.ndarray:
    """Per-position descriptors for pixel-vote classification.

    The contour block is shared; the texture block is evaluated on a disk of
    ``radius`` around each grid position inside the cell mask, with Haar
    windows centered on that position.
    """
    arr = _gray(img)
    h, w = arr.shape
    cell, _, _ = _regions(seg)
    contour = contour_features(img, seg)
    maps = TextureMaps(arr, params)
    yy, xx = np.mgrid[0:h, 0:w]
    rows = []
    for row in range(stride // 2, h, stride):
        for col in range(stride // 2, w, stride):
            if not cell[row, col]:
                continue
            x, y = col + 0.5, row + 0.5
            disk = ((xx + 0.5 - x) ** 2 + (yy + 0.5 - y) ** 2 <= radius ** 2) & cell
            rows.append(np.concatenate([contour, maps.features(disk, cell, (x, y), seg.outer.r)]))
    if not rows:
        raise EmptyRegion("no sample positions inside the cell mask")
    return np.vstack(rows)


# -- CSV interchange ---------------------------------------------------------

FEATURE_HEADER = ("id",) + COLUMN_NAMES + ("grade",)


class FeatureTable(NamedTuple):
    ids: list[str]
    X: np.ndarray
    grades: list[Grade | None]


def format_features_csv(rows: Iterable[tuple[str, Sequence[float] | FeatureVector, Grade | None]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FEATURE_HEADER)
    for ident, values, grade in rows:
        if isinstance(values, FeatureVector):
            values = values.values
        vals = [repr(float(v)) for v in values]
        if len(vals) != N_FEATURES:
            raise InvalidData(f"row {ident!r} has {len(vals)} features")
        writer.writerow([ident, *vals, "" if grade is None else Grade.parse(grade).name])
    return buf.getvalue()


def parse_features_csv(text: str, source: str = "<features>") -> FeatureTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError(f"{source}: empty features file") from None
    for col in FEATURE_HEADER:
        if col not in header:
            raise ValidationError(f"{source}: missing required column {col!r}")
    pos = {name: header.index(name) for name in FEATURE_HEADER}
    ids, rows, grades = [], [], []
    seen = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise ValidationError(f"{source}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        ident = rec[pos["id"]].strip()
        if ident in seen:
            raise ValidationError(f"{source}:{lineno}: duplicate id {ident!r}")
        seen.add(ident)
        vals = []
        for name in COLUMN_NAMES:
            raw = rec[pos[name]]
            try:
                v = float(raw)
            except ValueError:
                raise ValidationError(
                    f"{source}:{lineno}:{pos[name] + 1}: non-numeric value {raw!r} in {name}") from None
            if not math.isfinite(v):
                raise InvalidData(f"{source}:{lineno}:{pos[name] + 1}: non-finite value in {name}")
            vals.append(v)
        token = rec[pos["grade"]].strip()
        try:
            grade = Grade.parse(token) if token else None
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}:{pos['grade'] + 1}: {exc}") from None
        ids.append(ident)
        rows.append(vals)
        grades.append(grade)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), N_FEATURES)
    return FeatureTable(ids, X, grades)


def read_features_csv(path: str | os.PathLike) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_features_csv(fh.read(), str(path))
