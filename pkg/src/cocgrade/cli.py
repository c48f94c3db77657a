"""Command-line entry point: ``coc-grade <command> ...``.

Exit codes: 0 success, 2 validation error, 3 one or more images failed
segmentation (batch commands still process and report every other image).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import features as feat
from .config import PipelineConfig, default_config_json, load_config
from .errors import CocError, IncompatibleModel, SegmentationFailed, ValidationError
from .evaluation import confusion_and_accuracy, dice, rand_index, stratified_split
from .forest import ForestModel, ForestParams, aggregate_votes, assign, check_layout, train
from .grades import Grade
from .io_utils import atomic_write_json, atomic_write_text, dump_json
from .raster import Circle, RasterImage, load_image, load_mask, save_image, save_mask, to_uint8
from .preprocess import as_gray
from .segmentation import Segmentation, segment
from .synthdata import corpus_specs, generate

log = logging.getLogger("cocgrade")

EXIT_OK, EXIT_VALIDATION, EXIT_SEGMENTATION = 0, 2, 3
MANIFEST_COLUMNS = ("id", "image_path", "grade", "cell_mask_path", "nucleus_mask_path")


# -- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    id: str
    image_path: Path
    grade: Grade | None = None
    cell_mask_path: Path | None = None
    nucleus_mask_path: Path | None = None


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    """Parse a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError(f"{path}: empty manifest") from None
    for col in ("id", "image_path"):
        if col not in header:
            raise ValidationError(f"{path}:1: missing required column {col!r}")
    pos = {c: header.index(c) for c in MANIFEST_COLUMNS if c in header}
    rows, seen = [], set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise ValidationError(
                f"{path}:{lineno}:{min(len(rec), len(header)) + 1}: expected {len(header)} fields, got {len(rec)}")
        get = lambda c: rec[pos[c]].strip() if c in pos else ""  # noqa: E731
        ident = get("id")
        if not ident:
            raise ValidationError(f"{path}:{lineno}:{pos['id'] + 1}: empty id")
        if ident in seen:
            raise ValidationError(f"{path}:{lineno}:{pos['id'] + 1}: duplicate id {ident!r}")
        seen.add(ident)
        if not get("image_path"):
            raise ValidationError(f"{path}:{lineno}:{pos['image_path'] + 1}: empty image_path")
        grade = None
        if get("grade"):
            try:
                grade = Grade.parse(get("grade"))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}:{pos['grade'] + 1}: {exc}") from None
        opt = lambda c: (base / get(c)) if get(c) else None  # noqa: E731
        rows.append(ManifestRow(ident, base / get("image_path"), grade,
                                opt("cell_mask_path"), opt("nucleus_mask_path")))
    return rows


def format_manifest(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in rows:
        writer.writerow([r.get(c, "") or "" for c in MANIFEST_COLUMNS])
    return buf.getvalue()


# -- batch helpers -----------------------------------------------------------

def worker_count() -> int:
    """Worker threads for batch commands, capped by ``COC_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("COC_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValidationError(f"COC_THREADS must be an integer, got {cap!r}") from None
    return n


def ordered_map(fn: Callable, items: Sequence) -> list:
    """Map preserving input order, in parallel when more than one worker is allowed."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class ImageResult:
    row: ManifestRow
    seg: Segmentation | None = None
    vector: feat.FeatureVector | None = None
    error: str | None = None
    image: RasterImage | None = None


def _process(row: ManifestRow, cfg: PipelineConfig, keep_image: bool = False) -> ImageResult:
    try:
        img = load_image(row.image_path)
    except (OSError, ValueError) as exc:
        return ImageResult(row, error=f"cannot load image: {exc}")
    try:
        seg = segment(img, cfg.segment)
        vec = feat.extract(img, seg, cfg.features)
    except SegmentationFailed as exc:
        return ImageResult(row, error=f"segmentation failed: {exc}")
    except ValidationError as exc:
        return ImageResult(row, error=f"invalid image: {exc}")
    return ImageResult(row, seg, vec, image=img if keep_image else None)


def _report_failures(results: Sequence[ImageResult]) -> list[dict]:
    failures = [{"id": r.row.id, "error": r.error} for r in results if r.error]
    for f in failures:
        print(f"error: {f['id']}: {f['error']}", file=sys.stderr)
    return failures


# -- overlay -----------------------------------------------------------------

def _draw_circle(rgb: np.ndarray, c: Circle, dashed: bool, dash: float = 4.0) -> None:
    h, w = rgb.shape[:2]
    n = max(16, int(math.ceil(4 * math.pi * c.r)))
    t = 2 * math.pi * np.arange(n) / n
    if dashed:
        arc = c.r * t
        t = t[(np.floor(arc / dash) % 2) == 0]
    cols = np.floor(c.cx + c.r * np.cos(t)).astype(int)
    rows = np.floor(c.cy + c.r * np.sin(t)).astype(int)
    ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    rgb[rows[ok], cols[ok]] = (255, 0, 0)


def render_overlay(img: RasterImage, seg: Segmentation) -> np.ndarray:
    gray = to_uint8(as_gray(img).data)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    _draw_circle(rgb, seg.outer, dashed=False)
    _draw_circle(rgb, seg.nucleus, dashed=True)
    return rgb


# -- commands ----------------------------------------------------------------

def cmd_segment(args, cfg: PipelineConfig) -> int:
    img = load_image(args.input)
    seg = segment(img, cfg.segment)
    stem = Path(args.input).stem
    mask_dir = Path(args.out_masks) if args.out_masks else Path(args.input).parent
    record = seg.to_record()
    if args.out_overlay:
        save_image(render_overlay(img, seg).astype(np.float64) / 255.0, args.out_overlay)
    save_mask(seg.outer_mask, mask_dir / f"{stem}_cell.png")
    save_mask(seg.nucleus_mask, mask_dir / f"{stem}_nucleus.png")
    atomic_write_json(mask_dir / f"{stem}_segmentation.json", record)
    sys.stdout.write(dump_json(record))
    return EXIT_OK


def cmd_features(args, cfg: PipelineConfig) -> int:
    rows = read_manifest(args.manifest)
    results = ordered_map(lambda r: _process(r, cfg), rows)
    failures = _report_failures(results)
    text = feat.format_features_csv((r.row.id, r.vector, r.row.grade) for r in results if r.vector is not None)
    atomic_write_text(args.out, text)
    if args.report:
        atomic_write_json(args.report, {"n_images": len(rows), "failures": failures})
    return EXIT_SEGMENTATION if failures else EXIT_OK


FEATURE_SETS = {"all": None, "contour": feat.CONTOUR_COLUMNS, "texture": feat.TEXTURE_COLUMNS}


def cmd_train(args, cfg: PipelineConfig) -> int:
    table = feat.read_features_csv(args.features)
    labelled = [i for i, g in enumerate(table.grades) if g is not None]
    if len(labelled) < len(table.ids):
        raise ValidationError(f"{args.features}: {len(table.ids) - len(labelled)} rows lack a grade")
    if not table.ids:
        raise ValidationError(f"{args.features}: no rows to train on")
    fp = cfg.forest
    updates = {k: v for k, v in (("n_trees", args.trees), ("max_depth", args.depth),
                                  ("min_leaf", args.min_leaf), ("mtry", args.mtry),
                                  ("seed", args.seed), ("weight_mode", args.weight_mode)) if v is not None}
    if args.feature_set is not None:
        updates["columns"] = FEATURE_SETS[args.feature_set]
    params = ForestParams(**{**fp.to_dict(), **updates,
                             "columns": updates.get("columns", fp.columns)})

    grades = table.grades
    if args.no_split:
        train_idx, test_idx = list(range(len(grades))), []
        split = None
    else:
        fraction = args.train_fraction if args.train_fraction is not None else cfg.split.train_fraction
        split_seed = args.split_seed if args.split_seed is not None else (
            args.seed if args.seed is not None else cfg.split.seed)
        train_idx, test_idx = stratified_split(grades, fraction, split_seed)
        split = {"train_fraction": fraction, "seed": split_seed}

    X = table.X[train_idx]
    y = [grades[i] for i in train_idx]
    model = train(X, y, params, n_jobs=worker_count())
    model.training = {
        "split": split,
        "train_ids": [table.ids[i] for i in train_idx],
        "test_ids": [table.ids[i] for i in test_idx],
    }
    model.save(args.out)
    print(f"trained {params.n_trees} trees on {len(train_idx)} samples; "
          f"OOB error {model.oob_error:.4f}; held out {len(test_idx)}")
    # raw values (possibly negative) stay in the model; the display clamps at zero
    top = np.argsort(-model.importances, kind="stable")[:5]
    for j in top:
        spec = feat.LAYOUT[j]
        print(f"  {feat.COLUMN_NAMES[j]} {spec.name:<28} {max(0.0, model.importances[j]):.4f}")
    return EXIT_OK


def _predict_pixel_votes(model: ForestModel, res: ImageResult, cfg: PipelineConfig):
    rows = feat.local_feature_rows(res.image, res.seg, cfg.features,
                                   cfg.pixel_vote.stride, cfg.pixel_vote.radius)
    probs = model.predict_proba(rows)
    grade = aggregate_votes(Grade(int(k)) for k in np.argmax(probs, axis=1))
    return grade, probs.mean(axis=0)


def cmd_predict(args, cfg: PipelineConfig) -> int:
    model = ForestModel.load(args.model)
    check_layout(model)
    if args.input:
        rows = [ManifestRow(Path(args.input).stem, Path(args.input))]
    else:
        rows = read_manifest(args.manifest)
    pixel = args.vote_mode == "pixel"
    results = ordered_map(lambda r: _process(r, cfg, keep_image=pixel), rows)
    failures = _report_failures(results)
    print("id\tgrade\tp_A\tp_B\tp_C\tp_D")
    for r in results:
        if r.vector is None:
            continue
        if pixel:
            grade, p = _predict_pixel_votes(model, r, cfg)
        else:
            p = model.predict_proba(r.vector.values)[0]
            grade = assign(p)
        print("\t".join([r.row.id, grade.name] + [f"{v:.6f}" for v in p]))
    return EXIT_SEGMENTATION if failures else EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    model = ForestModel.load(args.model)
    check_layout(model)
    held_out = set(model.training.get("test_ids") or [])
    use_subset = args.subset == "test" and held_out

    if args.features:
        table = feat.read_features_csv(args.features)
        entries = [(i, v, g, None, None) for i, v, g in zip(table.ids, table.X, table.grades)]
        failures = []
    else:
        rows = read_manifest(args.manifest)
        if use_subset:
            rows = [r for r in rows if r.id in held_out]
        results = ordered_map(lambda r: _process(r, cfg), rows)
        failures = _report_failures(results)
        entries = [(r.row.id, r.vector.values, r.row.grade, r.seg, r.row)
                   for r in results if r.vector is not None]
    if use_subset:
        entries = [e for e in entries if e[0] in held_out]
    if not entries:
        raise ValidationError("nothing to evaluate")

    probs = model.predict_proba(np.vstack([e[1] for e in entries]))
    per_image, true, pred = [], [], []
    seg_scores = {"dice": {"outer": [], "nucleus": []}, "rand": {"outer": [], "nucleus": []}}
    for (ident, _, grade, seg, row), p in zip(entries, probs):
        g = assign(p)
        per_image.append({"id": ident, "true": grade.name if grade is not None else None,
                          "pred": g.name, "posterior": [float(v) for v in p]})
        if grade is not None:
            true.append(grade)
            pred.append(g)
        if seg is not None and row is not None:
            for key, path, mask in (("outer", row.cell_mask_path, seg.outer_mask),
                                    ("nucleus", row.nucleus_mask_path, seg.nucleus_mask)):
                if path is not None:
                    truth = load_mask(path)
                    seg_scores["dice"][key].append(dice(mask, truth))
                    seg_scores["rand"][key].append(rand_index(mask, truth))

    report = {"model_oob_error": float(model.oob_error), "n_evaluated": len(entries),
              "subset": "test" if use_subset else "all", "per_image": per_image,
              "failures": failures}
    if true:
        cm, acc = confusion_and_accuracy(true, pred)
        report["accuracy"] = acc
        report["confusion"] = cm.tolist()
    for metric in ("dice", "rand"):
        block = {k: float(np.mean(v)) for k, v in seg_scores[metric].items() if v}
        if block:
            report[metric] = block
    atomic_write_json(args.out, report)
    if "accuracy" in report:
        print(f"accuracy {report['accuracy']:.4f} on {len(true)} labelled images")
    return EXIT_SEGMENTATION if failures else EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = Path(args.outdir)
    specs = corpus_specs(args.count_per_grade, args.seed, side=args.side)

    def render(item):
        ident, spec = item
        ph = generate(spec)
        save_image(ph.image, out / "images" / f"{ident}.png")
        save_mask(ph.cell_mask, out / "masks" / f"{ident}_cell.png")
        save_mask(ph.nucleus_mask, out / "masks" / f"{ident}_nucleus.png")
        return {"id": ident, "image_path": f"images/{ident}.png", "grade": spec.grade.name,
                "cell_mask_path": f"masks/{ident}_cell.png",
                "nucleus_mask_path": f"masks/{ident}_nucleus.png"}

    rows = ordered_map(render, specs)
    atomic_write_text(out / "manifest.csv", format_manifest(rows))
    print(f"wrote {len(rows)} phantoms to {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coc-grade", description=__doc__.splitlines()[0])
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the annotated default JSON config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def with_config(p):
        p.add_argument("--config", help="JSON pipeline config (see --print-default-config)")
        return p

    p = with_config(sub.add_parser("segment", help="segment one image"))
    p.add_argument("--input", required=True)
    p.add_argument("--out-overlay")
    p.add_argument("--out-masks", help="directory for <stem>_cell.png, <stem>_nucleus.png and the JSON record")
    p.set_defaults(func=cmd_segment)

    p = with_config(sub.add_parser("features", help="featurize every image in a manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="optional JSON listing per-image failures")
    p.set_defaults(func=cmd_features)

    p = with_config(sub.add_parser("train", help="train a forest from a features CSV"))
    p.add_argument("--features", required=True)
    p.add_argument("--trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--min-leaf", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--weight-mode", choices=("uniform", "oob_accuracy"))
    p.add_argument("--feature-set", choices=tuple(FEATURE_SETS))
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--no-split", action="store_true", help="train on every row")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("predict", help="grade images with a trained model"))
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--input")
    g.add_argument("--manifest")
    p.add_argument("--vote-mode", choices=("image", "pixel"), default="image")
    p.set_defaults(func=cmd_predict)

    p = with_config(sub.add_parser("evaluate", help="score a model on a manifest"))
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--features", help="precomputed features CSV (skips segmentation metrics)")
    p.add_argument("--subset", choices=("test", "all"), default="test",
                   help="restrict to the model's held-out ids when recorded (default)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("synth", help="write a synthetic phantom corpus"))
    p.add_argument("--count-per-grade", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_default_config:
        sys.stdout.write(default_config_json())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except SegmentationFailed as exc:
        print(f"error: segmentation failed: {exc}", file=sys.stderr)
        return EXIT_SEGMENTATION
    except IncompatibleModel as exc:
        print(f"error: IncompatibleModel: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, CocError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
