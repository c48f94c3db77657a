"""Two-stage concentric segmentation: snake for the cell, region growing for the nucleus."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import DegenerateFit, InvalidParams, InvalidSeed, SegmentationFailed
from .preprocess import DiffusionParams, anisotropic_diffuse, as_gray, central_gradient, smooth_array
from .raster import BitMask, Circle, Contour, RasterImage, circle_points, polygon_area, rasterize_circle

log = logging.getLogger(__name__)

RESAMPLE_EVERY = 10
MIN_CONTOUR_AREA = 100.0
FIT_MAX_CONDITION = 1e12
NUCLEUS_CLAMP = 0.9
_MAX_BACKTRACK = 8
FORCE_PERCENTILE = 99.5


@dataclass(frozen=True)
class SnakeParams:
    n_points: int = 64
    alpha: float = 0.02
    beta: float = 0.01
    gamma: float = 1.0
    balloon: float = -0.2
    sigma_ext: float = 2.0
    max_iters: int = 1500
    tol: float = 0.05
    stall_iters: int = 5
    init_radius_frac: float = 0.45

    def __post_init__(self):
        if self.n_points < 16:
            raise InvalidParams("n_points must be at least 16")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParams("alpha and beta must be non-negative")
        if not self.gamma > 0:
            raise InvalidParams("gamma must be positive")
        if self.max_iters < 1:
            raise InvalidParams("max_iters must be at least 1")
        if not self.tol > 0:
            raise InvalidParams("tol must be positive")
        if self.stall_iters < 1:
            raise InvalidParams("stall_iters must be at least 1")
        if not self.sigma_ext > 0:
            raise InvalidParams("sigma_ext must be positive")
        if not 0 < self.init_radius_frac <= 0.5:
            raise InvalidParams("init_radius_frac must lie in (0, 0.5]")


@dataclass(frozen=True)
class RegionGrowParams:
    tau: float = 0.15
    connectivity: int = 4
    seed_window: int = 5

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise InvalidParams("tau must lie in (0, 1)")
        if self.connectivity not in (4, 8):
            raise InvalidParams("connectivity must be 4 or 8")
        if self.seed_window < 3 or self.seed_window % 2 == 0:
            raise InvalidParams("seed_window must be an odd count >= 3")


@dataclass(frozen=True)
class SegmentConfig:
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    snake: SnakeParams = field(default_factory=SnakeParams)
    region: RegionGrowParams = field(default_factory=RegionGrowParams)
    white_balance: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Segmentation:
    outer: Circle
    nucleus: Circle
    outer_mask: BitMask
    nucleus_mask: BitMask
    snake_contour: Contour
    converged: bool
    iterations_used: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.nucleus.r < self.outer.r:
            raise SegmentationFailed("nucleus radius must be smaller than the outer radius")
        if not self.outer.contains(self.nucleus.cx, self.nucleus.cy):
            raise SegmentationFailed("nucleus center lies outside the outer circle")
        if np.any(self.nucleus_mask.bits & ~self.outer_mask.bits):
            raise SegmentationFailed("nucleus mask is not contained in the outer mask")

    def to_record(self) -> dict:
        return {
            "outer": self.outer.to_dict(),
            "nucleus": self.nucleus.to_dict(),
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "warnings": list(self.warnings),
        }

    def __eq__(self, other):
        if not isinstance(other, Segmentation):
            return NotImplemented
        return (self.outer == other.outer and self.nucleus == other.nucleus
                and self.outer_mask == other.outer_mask
                and self.nucleus_mask == other.nucleus_mask
                and np.array_equal(self.snake_contour.points, other.snake_contour.points)
                and self.converged == other.converged
                and self.iterations_used == other.iterations_used
                and self.warnings == other.warnings)


# -- active contour --------------------------------------------------------

class SnakeResult(NamedTuple):
    contour: Contour
    converged: bool
    iterations: int


class _EdgeField:
    """Edge energy ``|grad(G * I)|^2`` and its gradient, scaled to unit strength.

    The scale is a high percentile of the force magnitude (robust to a few
    very strong edges); forces above it are capped at magnitude 1.
    """

    def __init__(self, arr: np.ndarray, sigma: float):
        gx, gy = central_gradient(smooth_array(arr, sigma))
        energy = gx * gx + gy * gy
        fx, fy = central_gradient(energy)
        mag = np.sqrt(fx * fx + fy * fy)
        scale = float(np.percentile(mag, FORCE_PERCENTILE))
        if scale <= 0:
            scale = float(mag.max()) or 1.0
        cap = np.maximum(mag / scale, 1.0)
        self.energy = energy / scale
        self.fx = fx / scale / cap
        self.fy = fy / scale / cap
        self.h, self.w = arr.shape

    def _sample(self, field_: np.ndarray, pts: np.ndarray) -> np.ndarray:
        coords = np.vstack([pts[:, 1] - 0.5, pts[:, 0] - 0.5])
        return ndimage.map_coordinates(field_, coords, order=1, mode="nearest")

    def force(self, pts: np.ndarray) -> np.ndarray:
        return np.column_stack([self._sample(self.fx, pts), self._sample(self.fy, pts)])

    def external_energy(self, pts: np.ndarray) -> float:
        return -float(self._sample(self.energy, pts).sum())


def _internal_force(pts: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    prev1, next1 = np.roll(pts, 1, axis=0), np.roll(pts, -1, axis=0)
    prev2, next2 = np.roll(pts, 2, axis=0), np.roll(pts, -2, axis=0)
    second = next1 - 2.0 * pts + prev1
    fourth = next2 - 4.0 * next1 + 6.0 * pts - 4.0 * prev1 + prev2
    return 2.0 * (alpha * second - beta * fourth)


def internal_energy(pts: np.ndarray, alpha: float, beta: float) -> float:
    d1 = np.roll(pts, -1, axis=0) - pts
    d2 = np.roll(pts, -1, axis=0) - 2.0 * pts + np.roll(pts, 1, axis=0)
    return float(alpha * np.sum(d1 * d1) + beta * np.sum(d2 * d2))


def snake_energy(pts: np.ndarray, edge: _EdgeField, p: SnakeParams) -> float:
    return internal_energy(pts, p.alpha, p.beta) + edge.external_energy(pts)


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _outward_normals(pts: np.ndarray) -> np.ndarray:
    t = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    n = np.column_stack([t[:, 1], -t[:, 0]])
    if _signed_area(pts) < 0:
        n = -n
    norm = np.hypot(n[:, 0], n[:, 1])
    norm[norm == 0] = 1.0
    return n / norm[:, None]


def resample_closed(pts: np.ndarray, n: int) -> np.ndarray:
    """Redistribute ``n`` points uniformly by arc length along a closed curve.

    The curve is the periodic cubic spline through ``pts`` (chord-length
    parameterized); linear chords would shave ~h^2/8R off a circle on
    every pass.
    """
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    knots = np.concatenate([[0.0], np.cumsum(seg)])
    if knots[-1] <= 0 or np.any(seg == 0):
        keep = np.concatenate([[True], seg[:-1] > 0])
        if keep.sum() < 4:
            return np.repeat(pts[:1], n, axis=0)
        return resample_closed(pts[keep], n)
    spline = CubicSpline(knots, closed, bc_type="periodic")
    dense_t = np.linspace(0.0, knots[-1], 16 * max(n, len(pts)) + 1)
    dense = spline(dense_t)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
    targets = arc[-1] * np.arange(n) / n
    return spline(np.interp(targets, arc, dense_t))


def snake_outer_boundary(img: RasterImage, p: SnakeParams | None = None,
                         init: Contour | None = None, trace: list | None = None) -> SnakeResult:
    """Shrink a closed active contour onto the outermost strong edge.

    Explicit gradient descent on elastic + rigid internal energy plus the
    negative squared gradient magnitude of the smoothed image, with a
    balloon pressure along the outward normal. With nonzero pressure the
    normal component of each move is ratcheted to the pressure direction
    and steps are backtracked so the enclosed area never reverses between
    resampling events; with zero pressure steps are backtracked so the
    energy never increases.

    Args:
        img: grayscale image, usually already diffused.
        p: contour parameters.
        init: starting contour; defaults to a centered circle of radius
            ``p.init_radius_frac * min(w, h)``.
        trace: optional list receiving one ``(area, energy, resampled)``
            tuple per iteration.

    Raises:
        SegmentationFailed: the contour enclosed less than 100 px^2.
    """
    p = p or SnakeParams()
    arr = img.data if img.channels == 1 else as_gray(img).data
    h, w = arr.shape
    edge = _EdgeField(arr, p.sigma_ext)

    if init is None:
        r0 = p.init_radius_frac * min(w, h)
        pts = circle_points(Circle(w / 2.0, h / 2.0, r0), p.n_points)
    else:
        pts = resample_closed(np.asarray(init.points, dtype=np.float64), p.n_points)
    pts = np.clip(pts, 0.0, [w, h])

    use_energy = p.balloon == 0
    energy = snake_energy(pts, edge, p) if use_energy else None
    area = polygon_area(pts)
    stall = 0
    converged = False
    it = 0
    for it in range(1, p.max_iters + 1):
        normals = _outward_normals(pts)
        ext = edge.force(pts)
        if not use_energy:
            # tangential image force only reparameterizes the curve
            ext = np.sum(ext * normals, axis=1)[:, None] * normals
        force = _internal_force(pts, p.alpha, p.beta) + ext + p.balloon * normals
        step = p.gamma * force
        if not use_energy:
            sign = np.sign(p.balloon)
            along = np.sum(step * normals, axis=1)
            wrong = along * sign < 0
            step[wrong] -= along[wrong, None] * normals[wrong]

        scale_ = 1.0
        new = np.clip(pts + step, 0.0, [w, h])
        for _ in range(_MAX_BACKTRACK):
            if use_energy:
                cand_energy = snake_energy(new, edge, p)
                ok = cand_energy <= energy
            else:
                cand_area = polygon_area(new)
                ok = (cand_area - area) * np.sign(p.balloon) >= 0
            if ok:
                break
            scale_ *= 0.5
            new = np.clip(pts + scale_ * step, 0.0, [w, h])
        else:
            new = pts

        disp = float(np.max(np.hypot(*(new - pts).T)))
        pts = new
        area = polygon_area(pts)
        if use_energy:
            energy = snake_energy(pts, edge, p)
        if area < MIN_CONTOUR_AREA:
            raise SegmentationFailed(f"active contour collapsed (area {area:.1f} px^2)")

        stall = stall + 1 if disp < p.tol else 0
        resampled = it % RESAMPLE_EVERY == 0
        if resampled:
            pts = np.clip(resample_closed(pts, p.n_points), 0.0, [w, h])
            area = polygon_area(pts)
            if use_energy:
                energy = snake_energy(pts, edge, p)
        if trace is not None:
            trace.append((area, energy, resampled))
        if stall >= p.stall_iters:
            converged = True
            break

    return SnakeResult(Contour(pts), converged, it)


# -- circle fitting ----------------------------------------------------------

def fit_circle(points) -> Circle:
    """Algebraic (Kasa) least-squares circle fit.

    Solves ``x^2 + y^2 + D x + E y + F = 0`` in centered, scale-normalized
    coordinates so the conditioning test is independent of image position.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateFit(f"need at least 3 points, got {len(pts)}")
    center = pts.mean(axis=0)
    q = pts - center
    scale = float(np.sqrt(np.mean(np.sum(q * q, axis=1))))
    if scale == 0:
        raise DegenerateFit("all points coincide")
    q = q / scale
    a = np.column_stack([q, np.ones(len(q))])
    b = -np.sum(q * q, axis=1)
    normal = a.T @ a
    if np.linalg.cond(normal) > FIT_MAX_CONDITION:
        raise DegenerateFit("points are (nearly) collinear")
    d, e, f = np.linalg.solve(normal, a.T @ b)
    ux, uy = -d / 2.0, -e / 2.0
    r2 = ux * ux + uy * uy - f
    if not r2 > 0:
        raise DegenerateFit("fit produced an imaginary radius")
    return Circle(float(center[0] + scale * ux), float(center[1] + scale * uy),
                  float(scale * np.sqrt(r2)))


# -- region growing ----------------------------------------------------------

def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def region_grow_nucleus(img: RasterImage, seed: tuple[float, float], bound: Circle,
                        p: RegionGrowParams | None = None) -> BitMask:
    """Flood from ``seed`` over pixels within a tolerance of the seed-window mean.

    The tolerance is ``p.tau`` times the intensity range inside ``bound``;
    admitted pixels must lie inside ``bound`` and connect to the seed.
    """
    p = p or RegionGrowParams()
    arr = img.data if img.channels == 1 else as_gray(img).data
    h, w = arr.shape
    sx, sy = float(seed[0]), float(seed[1])
    if not (0 <= sx < w and 0 <= sy < h):
        raise InvalidSeed(f"seed ({sx}, {sy}) lies outside the {w}x{h} image")
    if not bound.contains(sx, sy):
        raise InvalidSeed(f"seed ({sx}, {sy}) lies outside the bounding circle")
    col, row = int(sx), int(sy)

    inside = rasterize_circle(bound, w, h).bits.copy()
    inside[row, col] = True
    half = p.seed_window // 2
    window = arr[max(0, row - half):row + half + 1, max(0, col - half):col + half + 1]
    mu = float(window.mean())
    values = arr[inside]
    tau_abs = p.tau * float(values.max() - values.min())

    candidates = inside & (np.abs(arr - mu) <= tau_abs)
    candidates[row, col] = True
    labels, _ = ndimage.label(candidates, structure=_structure(p.connectivity))
    return BitMask(labels == labels[row, col])


def boundary_pixels(mask: BitMask) -> np.ndarray:
    """Pixel centers of mask pixels with a 4-neighbor outside the mask."""
    bits = mask.bits
    interior = ndimage.binary_erosion(bits, structure=_structure(4), border_value=0)
    rows, cols = np.nonzero(bits & ~interior)
    return np.column_stack([cols + 0.5, rows + 0.5])


# -- full pipeline -----------------------------------------------------------

def preprocess_gray(img: RasterImage, cfg: SegmentConfig) -> tuple[RasterImage, RasterImage]:
    """Return ``(gray, diffused)`` for an input frame."""
    gray = as_gray(img, balance=cfg.white_balance)
    return gray, anisotropic_diffuse(gray, cfg.diffusion)


def segment(img: RasterImage, cfg: SegmentConfig | None = None) -> Segmentation:
    cfg = cfg or SegmentConfig()
    img.require_pipeline_size()
    _, smooth = preprocess_gray(img, cfg)
    h, w = smooth.height, smooth.width

    contour, converged, iters = snake_outer_boundary(smooth, cfg.snake)
    outer = fit_circle(contour.points)
    if not (0 <= outer.cx < w and 0 <= outer.cy < h):
        raise SegmentationFailed("fitted cell center lies outside the image")

    warnings: list[str] = []
    grown = region_grow_nucleus(smooth, (outer.cx, outer.cy), outer, cfg.region)
    nucleus = fit_circle(boundary_pixels(grown))
    if not outer.contains(nucleus.cx, nucleus.cy):
        warnings.append("nucleus_recentered")
        nucleus = Circle(outer.cx, outer.cy, nucleus.r)
    if nucleus.r >= outer.r:
        warnings.append("nucleus_radius_clamped")
        nucleus = Circle(nucleus.cx, nucleus.cy, NUCLEUS_CLAMP * outer.r)
    for msg in warnings:
        log.warning("segmentation: %s", msg)

    outer_mask = rasterize_circle(outer, w, h)
    nucleus_mask = rasterize_circle(nucleus, w, h) & outer_mask
    return Segmentation(outer, nucleus, outer_mask, nucleus_mask, contour,
                        converged, iters, tuple(warnings))
