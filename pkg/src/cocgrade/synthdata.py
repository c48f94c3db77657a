"""Seeded synthetic cumulus-oocyte complex phantoms with known geometry.

Layout of a phantom, from the center out: a bright nucleus disk
(0.45 of the ooplasm radius), the ooplasm disk, and a granular cumulus
annulus whose thickness and texture depend on the grade. The truth
"cell" mask is the whole complex (ooplasm plus cumulus), which is
what the outer contour delineates from the background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams
from .grades import GRADES, Grade
from .preprocess import smooth_array
from .raster import BitMask, Circle, RasterImage, rasterize_circle

BACKGROUND = 0.10
OOPLASM = 0.58
NUCLEUS = 0.85
CUMULUS_LOW = 0.50
CUMULUS_HIGH = 0.75
OPTICS_SIGMA = 0.7

NUCLEUS_FRAC = 0.45
MAX_REACH = 0.42  # farthest a cell edge may sit from the image center, fraction of side


@dataclass(frozen=True)
class GradeProfile:
    ooplasm_radius: float  # mean ooplasm radius as a fraction of the image side
    thickness: float       # cumulus thickness as a fraction of the ooplasm radius
    granule_sigma: float   # smoothing scale of the speckle field, px
    coverage: float        # fraction of cumulus pixels that are bright granules
    patchy: bool           # non-granule cumulus pixels fall back to background
    ooplasm_texture: float  # std of the ooplasm heterogeneity field


PROFILES = {
    Grade.A: GradeProfile(0.25, 0.50, 1.0, 0.50, False, 0.0),
    Grade.B: GradeProfile(0.23, 0.30, 2.5, 0.75, False, 0.0),
    Grade.C: GradeProfile(0.21, 0.12, 2.5, 0.75, False, 0.0),
    Grade.D: GradeProfile(0.19, 0.03, 1.5, 0.35, True, 0.07),
}


@dataclass(frozen=True)
class PhantomSpec:
    grade: Grade
    side: int = 256
    seed: int = 0
    contrast: float = 1.0
    noise: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "grade", Grade.parse(self.grade))
        if self.side < 128:
            raise InvalidParams(f"phantom side must be >= 128, got {self.side}")
        if not 0 <= self.noise <= 0.1:
            raise InvalidParams(f"noise sigma must lie in [0, 0.1], got {self.noise}")
        if not 0 < self.contrast <= 1:
            raise InvalidParams(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise InvalidParams("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class Phantom:
    image: RasterImage
    cell_mask: BitMask
    nucleus_mask: BitMask
    grade: Grade
    cell: Circle
    ooplasm: Circle
    nucleus: Circle

    @property
    def cumulus_thickness(self) -> float:
        return self.cell.r - self.ooplasm.r


def _speckle(rng: np.random.Generator, shape, sigma: float, coverage: float) -> np.ndarray:
    field = smooth_array(rng.standard_normal(shape), sigma)
    return field >= np.quantile(field, 1.0 - coverage)


def generate(spec: PhantomSpec) -> Phantom:
    """Render one phantom; identical specs give identical pixels."""
    rng = np.random.default_rng(spec.seed)
    side = spec.side
    prof = PROFILES[spec.grade]

    r_ooplasm = prof.ooplasm_radius * side * (1.0 + rng.uniform(-0.1, 0.1))
    r_cell = r_ooplasm * (1.0 + prof.thickness)
    dx, dy = rng.uniform(-0.05, 0.05, size=2) * side
    # pull large complexes toward the center so they stay inside the field
    room = MAX_REACH * side - r_cell
    shift = np.hypot(dx, dy)
    if shift > room:
        dx, dy = dx * max(room, 0.0) / shift, dy * max(room, 0.0) / shift
    cx, cy = side / 2.0 + dx, side / 2.0 + dy
    ooplasm = Circle(cx, cy, r_ooplasm)
    nucleus = Circle(cx, cy, NUCLEUS_FRAC * r_ooplasm)
    cell = Circle(cx, cy, r_cell)

    cell_mask = rasterize_circle(cell, side, side)
    ooplasm_mask = rasterize_circle(ooplasm, side, side)
    nucleus_mask = rasterize_circle(nucleus, side, side)
    cumulus = cell_mask.bits & ~ooplasm_mask.bits

    granules = _speckle(rng, (side, side), prof.granule_sigma, prof.coverage)
    texture = smooth_array(rng.standard_normal((side, side)), 2.0)
    texture *= prof.ooplasm_texture / max(float(texture.std()), 1e-12)

    img = np.full((side, side), BACKGROUND)
    cum_values = np.where(granules, CUMULUS_HIGH, BACKGROUND if prof.patchy else CUMULUS_LOW)
    img[cumulus] = cum_values[cumulus]
    ring = ooplasm_mask.bits & ~nucleus_mask.bits
    img[ring] = OOPLASM + texture[ring]
    img[nucleus_mask.bits] = NUCLEUS

    img = smooth_array(img, OPTICS_SIGMA)
    img = BACKGROUND + spec.contrast * (img - BACKGROUND)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return Phantom(RasterImage(np.clip(img, 0.0, 1.0)), cell_mask, nucleus_mask,
                   spec.grade, cell, ooplasm, nucleus)


def phantom_seed(corpus_seed: int, grade: Grade, index: int) -> int:
    ss = np.random.SeedSequence([int(corpus_seed), int(grade), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def corpus_specs(count_per_grade: int, seed: int, side: int = 256,
                 contrast_range: tuple[float, float] = (0.6, 1.0),
                 noise_range: tuple[float, float] = (0.01, 0.05)) -> list[tuple[str, PhantomSpec]]:
    """Class-balanced list of ``(id, spec)`` pairs, grade-major order."""
    if count_per_grade < 1:
        raise InvalidParams("count_per_grade must be at least 1")
    out = []
    for grade in GRADES:
        for k in range(count_per_grade):
            s = phantom_seed(seed, grade, k)
            rng = np.random.default_rng(s ^ 0x5EED)
            contrast = float(rng.uniform(*contrast_range))
            noise = float(rng.uniform(*noise_range))
            out.append((f"{grade.name}{k:03d}",
                        PhantomSpec(grade, side=side, seed=s, contrast=contrast, noise=noise)))
    return out
