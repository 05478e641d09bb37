"""Command-line entry points: simulate, train, eval, export-segmap."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from coverhead import __version__
from coverhead.core import (
    Annotation,
    ConfigError,
    CoverheadError,
    SpeciesRegistry,
    dataclass_from_kv,
    parse_kv,
    read_annotations,
    write_annotations,
)
from coverhead.evaluation import Sample, make_folds, run_cv
from coverhead.features import FeatureMap, extract, fit_normalizer, read_fmap, write_fmap
from coverhead.head import forward, read_params, segmentation_map, segmentation_rgb, write_params
from coverhead.metrics import evaluate, species_means
from coverhead.ppm import decode_ppm, read_ppm, write_ppm
from coverhead.simulator import SimConfig, annotate_series, generate_series, render, true_cover, write_series
from coverhead.trainer import TrainConfig, predict, prepare_sample, train

log = logging.getLogger("coverhead")

MANIFEST = "manifest.json"
IMAGE_DIR = "images"
ANNOTATIONS = "annotations.csv"
CACHE_DIR = ".fmap_cache"


def image_name(unit: int, camera: int, week: int) -> str:
    return f"u{unit:02d}_c{camera}_w{week:02d}.ppm"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Staging:
    """Write outputs into a scratch directory and move them into place only on success."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        self.out.mkdir(parents=True, exist_ok=True)
        for entry in sorted(self.tmp.iterdir()):
            target = self.out / entry.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            shutil.move(str(entry), str(target))
        self.tmp.rmdir()
        return False


def write_manifest(directory: Path, args, started: str, inputs: list[str], extra: dict | None = None) -> None:
    outputs = sorted(str(p.relative_to(directory)) for p in directory.rglob("*") if p.is_file())
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


# --- dataset loading ----------------------------------------------------------

def feature_cache_key(image_bytes: bytes, radius: int) -> str:
    h = hashlib.sha256()
    h.update(f"extract-v1 radius={radius}\n".encode())
    h.update(image_bytes)
    return h.hexdigest()


def load_features(path: Path, radius: int, cache_dir: Path | None) -> FeatureMap:
    raw = path.read_bytes()
    if cache_dir is None:
        return extract(read_ppm(path), radius)
    cached = cache_dir / f"{feature_cache_key(raw, radius)}.fmap"
    if cached.exists():
        return read_fmap(cached)
    fmap = extract(decode_ppm(raw), radius)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = cached.with_suffix(".tmp")
    write_fmap(fmap, tmp)
    tmp.replace(cached)
    return fmap


def load_dataset(dataset_dir, radius: int = 3, use_cache: bool = True) -> tuple[SpeciesRegistry, list[Sample]]:
    root = Path(dataset_dir)
    ann_path = root / ANNOTATIONS
    if not ann_path.exists():
        raise CoverheadError(f"missing annotation file {ann_path}")
    registry, annotations = read_annotations(ann_path)
    by_key = {a.key: a for a in annotations}
    images = {}
    for p in sorted((root / IMAGE_DIR).glob("u*_c*_w*.ppm")):
        stem = p.stem  # uUU_cC_wWW
        try:
            u, c, w = (int(part[1:]) for part in stem.split("_"))
        except ValueError:
            continue
        images[(u, c, w)] = p
    if not images:
        raise CoverheadError(f"no images found under {root / IMAGE_DIR}")
    missing = sorted(set(images) - set(by_key))
    if missing:
        raise CoverheadError(f"missing annotations for (unit, camera, week): {missing}")
    cache = root / CACHE_DIR if use_cache else None
    samples = []
    for key in sorted(images):
        fmap = load_features(images[key], radius, cache)
        samples.append(Sample(*key, fmap, np.asarray(by_key[key].cover)))
    return registry, samples


# --- SVG ----------------------------------------------------------------------

def week_chart_svg(table, width: int = 480, height: int = 240) -> str:
    """Line chart of week-wise MSAE (solid) and mean cover sum (dashed, right axis)."""
    pad = 36
    weeks = table.weeks

    def series(values):
        pts = [(w, v) for w, v in zip(weeks, values) if v is not None]
        top = max((v for _, v in pts), default=1.0) or 1.0
        coords = [
            (pad + (w - 1) / max(1, len(weeks) - 1) * (width - 2 * pad), height - pad - v / top * (height - 2 * pad))
            for w, v in pts
        ]
        return " ".join(f"{x:.1f},{y:.1f}" for x, y in coords), top

    msae_pts, msae_top = series(table.msae)
    sum_pts, sum_top = series(table.cover_sum)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<polyline points="{msae_pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
        f'<polyline points="{sum_pts}" fill="none" stroke="#555" stroke-dasharray="5,4"/>\n'
        f'<text x="{pad}" y="{pad - 8}" font-size="11">MSAE (max {msae_top:.3f})</text>\n'
        f'<text x="{width - pad}" y="{pad - 8}" font-size="11" text-anchor="end">cover sum (max {sum_top:.1f}%)</text>\n'
        f'<text x="{width / 2}" y="{height - 8}" font-size="11" text-anchor="middle">week</text>\n'
        "</svg>\n"
    )


# --- commands -----------------------------------------------------------------

def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError("image-size", f"expected WxH, got {text!r}") from None


def _sim_config(args) -> tuple[SimConfig, float]:
    values = parse_kv(Path(args.config).read_text(), args.config) if args.config else {}
    noise = float(values.pop("noise_sd", 0.1))
    config = dataclass_from_kv(SimConfig, values)
    changes = {}
    if args.units is not None:
        changes["n_units"] = args.units
    if args.weeks is not None:
        changes["n_weeks"] = args.weeks
    if args.image_size:
        changes["width"], changes["height"] = _parse_size(args.image_size)
    if args.noise_sd is not None:
        noise = args.noise_sd
    return config.replace(**changes), noise


def cmd_simulate(args) -> int:
    started = _now()
    config, noise_sd = _sim_config(args)
    with _Staging(args.out) as tmp:
        (tmp / IMAGE_DIR).mkdir()
        (tmp / "series").mkdir()
        annotations: list[Annotation] = []
        truth: list[Annotation] = []
        for unit in range(config.n_units):
            series = generate_series(config, args.seed, unit)
            write_series(tmp / "series" / f"unit_{unit:02d}.json", series)
            annotations.extend(annotate_series(series, noise_sd, args.seed))
            for camera, scenes in enumerate(series.scenes):
                for scene in scenes:
                    write_ppm(tmp / IMAGE_DIR / image_name(unit, camera, scene.week), render(scene))
                    truth.append(Annotation(unit, camera, scene.week, tuple(true_cover(scene)[0])))
        write_annotations(tmp / ANNOTATIONS, annotations)
        write_annotations(tmp / "true_cover.csv", truth)
        write_manifest(tmp, args, started, [], {"sim_config": dataclasses.asdict(config),
                                                "noise_sd": noise_sd})
    print(f"wrote {len(truth)} images to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    changes = {"seed": args.seed}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    return config.replace(**changes)


def cmd_train(args) -> int:
    started = _now()
    config = _train_config(args)
    registry, samples = load_dataset(args.dataset, args.radius, not args.no_cache)
    stats = fit_normalizer([s.features for s in samples])
    means = species_means([s.target for s in samples])
    params, history = train([(s.features, s.target) for s in samples], config, registry, stats)
    with _Staging(args.out) as tmp:
        write_params(tmp / "params.json", params, stats,
                     {"feature_radius": args.radius, "species_means": [float(v) for v in means.values]})
        (tmp / "history.csv").write_text(history.to_csv())
        write_manifest(tmp, args, started, [str(Path(args.dataset) / ANNOTATIONS)],
                       {"train_config": {k: getattr(config, k) for k in config.__dataclass_fields__}})
    print(f"trained {config.epochs} epochs on {len(samples)} images; final loss {history.loss[-1]:.4f}")
    return 0


def _check_registry(expected: SpeciesRegistry, found: SpeciesRegistry, what: str) -> None:
    if expected != found:
        raise CoverheadError(f"registry mismatch: {what} has {list(found.names)}, dataset has {list(expected.names)}")


def _write_predictions(path: Path, keys, preds, registry) -> None:
    rows = [Annotation(u, c, w, tuple(float(np.clip(v, 0, 100)) for v in p)) for (u, c, w), p in zip(keys, preds)]
    write_annotations(path, rows, registry)


def cmd_eval(args) -> int:
    started = _now()
    modes = sum(bool(x) for x in (args.cv, args.params, args.predictions))
    if modes != 1:
        raise ConfigError("mode", "choose exactly one of --cv, --params, --predictions")
    inputs = [str(Path(args.dataset) / ANNOTATIONS)]

    if args.predictions:
        registry, truth = read_annotations(Path(args.dataset) / ANNOTATIONS)
        pred_registry, preds = read_annotations(args.predictions)
        _check_registry(registry, pred_registry, f"predictions file {args.predictions}")
        pred_by_key = {a.key: a for a in preds}
        missing = sorted(a.key for a in truth if a.key not in pred_by_key)
        if missing:
            raise CoverheadError(f"predictions missing for (unit, camera, week): {missing}")
        report = evaluate([pred_by_key[a.key].cover for a in truth], [a.cover for a in truth],
                          species_means([a.cover for a in truth]))
        with _Staging(args.out) as tmp:
            (tmp / "metrics.json").write_text(report.to_json())
            (tmp / "metrics.csv").write_text(report.to_csv(registry.names))
            write_manifest(tmp, args, started, inputs + [args.predictions])
        print(f"MAE {report.mae:.4f}  MSAE {report.msae:.4f}")
        return 0

    registry, samples = load_dataset(args.dataset, args.radius, not args.no_cache)

    if args.cv:
        config = _train_config(args)
        folds = make_folds(sorted({s.unit for s in samples}), args.seed)
        report = run_cv(samples, folds, config, registry)
        with _Staging(args.out) as tmp:
            report.write(tmp)
            (tmp / "week_msae.svg").write_text(week_chart_svg(report.weeks))
            write_manifest(tmp, args, started, inputs,
                           {"train_config": {k: getattr(config, k) for k in config.__dataclass_fields__}})
        print(f"{len(folds)}-fold CV: MAE {report.averaged.mae:.4f}  MSAE {report.averaged.msae:.4f}  "
              f"(constant predictor MAE {report.constant_mae:.4f})")
        return 0

    params, stats = read_params(args.params)
    _check_registry(registry, params.registry, f"params {args.params}")
    with open(args.params) as fh:
        doc = json.load(fh)
    means = doc.get("species_means") or species_means([s.target for s in samples]).values
    preds = np.array([predict(s.features, params, stats) for s in samples])
    targets = np.array([s.target for s in samples])
    report = evaluate(preds, targets, means)
    with _Staging(args.out) as tmp:
        (tmp / "metrics.json").write_text(report.to_json())
        (tmp / "metrics.csv").write_text(report.to_csv(registry.names))
        _write_predictions(tmp / "predictions.csv", [(s.unit, s.camera, s.week) for s in samples], preds, registry)
        if args.export_segmaps:
            (tmp / "segmaps").mkdir()
            for s in samples:
                X = prepare_sample(s.features, stats, False, np.float64)
                fmap = X.reshape(X.shape[0], s.features.height, s.features.width)
                labels = segmentation_map(forward(fmap, params).maps)
                write_ppm(tmp / "segmaps" / image_name(s.unit, s.camera, s.week),
                          segmentation_rgb(labels, params.n_species))
        write_manifest(tmp, args, started, inputs + [args.params])
    print(f"MAE {report.mae:.4f}  MSAE {report.msae:.4f}")
    return 0


def export_segmap(image: np.ndarray, params, stats, radius: int = 3) -> np.ndarray:
    """Palette-coloured segmentation of one RGB image."""
    fmap = extract(image, radius)
    X = prepare_sample(fmap, stats, False, np.float64)
    labels = segmentation_map(forward(X.reshape(fmap.data.shape), params).maps)
    return segmentation_rgb(labels, params.n_species)


def cmd_export_segmap(args) -> int:
    params, stats = read_params(args.params)
    with open(args.params) as fh:
        radius = int(json.load(fh).get("feature_radius", 3))
    rgb = export_segmap(read_ppm(args.image), params, stats, radius)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".partial")
    write_ppm(tmp, rgb)
    tmp.replace(out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coverhead", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic EcoUnit dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value simulator config file")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--units", type=int)
    p.add_argument("--weeks", type=int)
    p.add_argument("--image-size", help="WxH, e.g. 192x96")
    p.add_argument("--noise-sd", type=float, help="relative annotation noise (default 0.1)")
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (
        ("train", cmd_train, "train the head on a dataset"),
        ("eval", cmd_eval, "evaluate params, a predictions file, or run cross-validation"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("dataset")
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="key=value training config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int)
        p.add_argument("--radius", type=int, default=3, help="feature window radius")
        p.add_argument("--no-cache", action="store_true", help="do not read or write the feature cache")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--cv", action="store_true", help="leave-two-units-out cross-validation")
            p.add_argument("--params", help="trained params JSON")
            p.add_argument("--predictions", help="predicted covers in annotation CSV format")
            p.add_argument("--export-segmaps", action="store_true")

    p = sub.add_parser("export-segmap", help="write a segmentation PPM for one image")
    p.add_argument("image")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_segmap, seed=None, config=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CoverheadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
