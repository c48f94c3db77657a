"""Pipeline configuration: every tunable the classifier and segmenter expose."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError
from .features import FeatureParams
from .forest import ForestParams
from .preprocess import DiffusionParams
from .segmentation import RegionGrowParams, SegmentConfig, SnakeParams

_COMMENTS = {
    "diffusion": "Perona-Malik smoothing before segmentation: exp(-(s/kappa)^2) conduction, "
                 "step lam in (0, 0.25].",
    "snake": "Active contour for the cell boundary. balloon < 0 shrinks; forces are in units of "
             "a high-percentile edge strength. Converged when every point moves less than tol "
             "for stall_iters iterations. init_radius_frac * min(w, h) is the start circle.",
    "region_grow": "Nucleus flood fill from the cell center: admit pixels within "
                   "tau * (intensity range inside the cell) of the seed_window mean.",
    "features": "LoG scales (pixels) and Haar window side as a multiple of the outer radius.",
    "forest": "Random forest. max_depth null = unbounded; mtry null = ceil(sqrt(#columns)); "
              "weight_mode uniform | oob_accuracy.",
    "split": "Stratified train/test split used by `train` (train_fraction goes to training).",
    "pixel_vote": "Optional per-position classification with majority vote (predict --vote-mode pixel).",
}


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.3
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValidationError("split.train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PixelVoteConfig:
    stride: int = 8
    radius: float = 8.0

    def __post_init__(self):
        if self.stride < 1 or not self.radius > 0:
            raise ValidationError("pixel_vote.stride must be >= 1 and radius > 0")


@dataclass(frozen=True)
class PipelineConfig:
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    snake: SnakeParams = field(default_factory=SnakeParams)
    region_grow: RegionGrowParams = field(default_factory=RegionGrowParams)
    white_balance: bool = True
    features: FeatureParams = field(default_factory=FeatureParams)
    forest: ForestParams = field(default_factory=lambda: ForestParams(seed=42))
    split: SplitConfig = field(default_factory=SplitConfig)
    pixel_vote: PixelVoteConfig = field(default_factory=PixelVoteConfig)

    @property
    def segment(self) -> SegmentConfig:
        return SegmentConfig(self.diffusion, self.snake, self.region_grow, self.white_balance)

    def to_dict(self, annotate: bool = False) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if hasattr(val, "to_dict"):
                d = val.to_dict()
            elif hasattr(val, "__dataclass_fields__"):
                d = asdict(val)
            else:
                d = val
            if annotate and isinstance(d, dict) and f.name in _COMMENTS:
                d = {"_comment": _COMMENTS[f.name], **d}
            out[f.name] = d
        return out


_SECTIONS = {
    "diffusion": DiffusionParams,
    "snake": SnakeParams,
    "region_grow": RegionGrowParams,
    "features": FeatureParams,
    "forest": ForestParams,
    "split": SplitConfig,
    "pixel_vote": PixelVoteConfig,
}


def _build(cls, raw, section: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    data = {k: v for k, v in raw.items() if not k.startswith("_")}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown keys in config section {section!r}: {unknown}")
    if cls is ForestParams and data.get("columns") is not None:
        data["columns"] = tuple(data["columns"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"config section {section!r}: {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"config section {section!r}: {exc}") from None


def config_from_dict(obj: dict) -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ValidationError("config must be a JSON object")
    data = {k: v for k, v in obj.items() if not k.startswith("_")}
    unknown = sorted(set(data) - set(_SECTIONS) - {"white_balance"})
    if unknown:
        raise ValidationError(f"unknown config sections: {unknown}")
    kwargs = {name: _build(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    if "white_balance" in data:
        if not isinstance(data["white_balance"], bool):
            raise ValidationError("white_balance must be true or false")
        kwargs["white_balance"] = data["white_balance"]
    return PipelineConfig(**kwargs)


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(obj)


def default_config_json() -> str:
    return json.dumps(PipelineConfig().to_dict(annotate=True), indent=2) + "\n"
