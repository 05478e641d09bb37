"""Leave-two-units-out cross-validation and week-wise error analysis."""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from coverhead.core import DEFAULT_REGISTRY, CoverheadError, DomainError, SpeciesRegistry
from coverhead.features import FeatureMap, NormStats, fit_normalizer
from coverhead.metrics import MEAN_FLOOR, MetricsReport, SpeciesMeans, average_reports, evaluate, species_means
from coverhead.trainer import TrainConfig, TrainHistory, predict, train

log = logging.getLogger(__name__)

N_WEEKS = 18


class UndefinedCorrelationError(CoverheadError):
    pass


@dataclass(frozen=True)
class Sample:
    unit: int
    camera: int
    week: int
    features: FeatureMap
    target: np.ndarray


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    test_units: tuple[int, ...]
    train_units: tuple[int, ...]


def make_folds(unit_ids: Sequence[int], seed: int = 0) -> list[FoldSpec]:
    """Shuffle units with ``seed`` and pair them up; each pair is one fold's test set."""
    ids = list(unit_ids)
    if len(set(ids)) != len(ids):
        raise DomainError("unit ids must be distinct")
    if not ids or len(ids) % 2:
        raise DomainError(f"need a positive even number of units, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    for k in range(len(ids) // 2):
        test = tuple(sorted(shuffled[2 * k: 2 * k + 2]))
        train_units = tuple(u for u in sorted(ids) if u not in test)
        folds.append(FoldSpec(k, test, train_units))
    return folds


@dataclass
class WeekTable:
    weeks: list[int]
    n_images: list[int]
    # None marks a week without images
    msae: list[float | None]
    cover_sum: list[float | None]

    def populated(self) -> list[int]:
        return [w for w, n in zip(self.weeks, self.n_images) if n > 0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["week", "n_images", "msae", "cover_sum"])
        for row in zip(self.weeks, self.n_images, self.msae, self.cover_sum):
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"weeks": self.weeks, "n_images": self.n_images, "msae": self.msae, "cover_sum": self.cover_sum}


def weekwise_error(preds, targets, weeks, means, n_weeks: int = N_WEEKS) -> WeekTable:
    """MSAE and mean target cover sum per recording week.

    ``means`` holds the scaling denominators, either one vector for all images
    or one row per image (e.g. the training means of the fold each image was
    tested in). Species whose mean sits at the floor (absent from training)
    are left out of the species average, since their scaled error is not
    meaningful.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weeks = np.asarray(weeks, dtype=int)
    if preds.shape != targets.shape or preds.shape[0] != weeks.shape[0]:
        raise CoverheadError("predictions, targets and weeks must have matching lengths")
    if weeks.size and (weeks.min() < 1 or weeks.max() > n_weeks):
        raise DomainError(f"week labels must lie in [1, {n_weeks}]")
    means = np.broadcast_to(np.asarray(means, dtype=np.float64), preds.shape)
    keep = means > MEAN_FLOOR
    scaled = np.where(keep, np.abs(preds - targets) / np.where(keep, means, 1.0), 0.0)
    table = WeekTable([], [], [], [])
    for week in range(1, n_weeks + 1):
        sel = weeks == week
        n = int(sel.sum())
        table.weeks.append(week)
        table.n_images.append(n)
        if n == 0:
            table.msae.append(None)
            table.cover_sum.append(None)
        else:
            # mean over images per species, then over the species with a usable mean
            counts = keep[sel].sum(axis=0)
            used = counts > 0
            per_species = scaled[sel].sum(axis=0)[used] / counts[used]
            table.msae.append(float(per_species.mean()) if used.any() else None)
            table.cover_sum.append(float(targets[sel].sum(axis=1).mean()))
    return table


def cover_error_correlation(mean_cover, msae) -> tuple[float, float]:
    """Pearson r between species mean cover and species MSAE, and r squared."""
    x = np.asarray(mean_cover, dtype=np.float64)
    y = np.asarray(msae, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise CoverheadError("inputs must be 1-D vectors of equal length")
    if x.size < 3:
        raise CoverheadError("need at least 3 species")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = float(np.sqrt(xc @ xc)), float(np.sqrt(yc @ yc))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    r = float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))
    return r, r * r


@dataclass
class FoldResult:
    spec: FoldSpec
    report: MetricsReport
    constant_mae: float
    means: SpeciesMeans
    normalization: NormStats
    history: TrainHistory
    keys: list[tuple[int, int, int]]
    preds: np.ndarray
    targets: np.ndarray
    seconds: float = 0.0


@dataclass
class CvReport:
    folds: list[FoldResult]
    averaged: MetricsReport
    constant_mae: float
    weeks: WeekTable
    species_msae: np.ndarray
    species_mean_cover: np.ndarray
    correlation: tuple[float, float] | None
    registry: SpeciesRegistry = DEFAULT_REGISTRY
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "registry": self.registry.to_list(),
            "averaged": self.averaged.to_dict(),
            "constant_predictor_mae": self.constant_mae,
            "folds": [
                {
                    "fold": f.spec.fold_index,
                    "test_units": list(f.spec.test_units),
                    "metrics": f.report.to_dict(),
                    "constant_predictor_mae": f.constant_mae,
                    "final_kappa": f.history.kappa[-1],
                    "final_train_loss": f.history.loss[-1],
                    "seconds": f.seconds,
                }
                for f in self.folds
            ],
            "weeks": self.weeks.to_dict(),
            "correlation": None if self.correlation is None else {
                "pearson_r": self.correlation[0], "r_squared": self.correlation[1],
            },
            **self.extra,
        }

    def fold_metrics_csv(self) -> str:
        names = self.registry.names
        buf = io.StringIO()
        rows = []
        for f in self.folds:
            row = {"fold": f.spec.fold_index, "test_units": " ".join(map(str, f.spec.test_units))}
            row.update(f.report.csv_row(names))
            row["constant_mae"] = repr(f.constant_mae)
            rows.append(row)
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def species_msae_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["species", "mean_cover", "mae", "msae"])
        for name, c, a, s in zip(self.registry.names, self.species_mean_cover,
                                 self.averaged.per_species_mae, self.species_msae):
            w.writerow([name, repr(float(c)), repr(float(a)), repr(float(s))])
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        files = {
            "cv_report.json": json.dumps(self.to_dict(), indent=1, sort_keys=True),
            "fold_metrics.csv": self.fold_metrics_csv(),
            "week_msae.csv": self.weeks.to_csv(),
            "species_msae.csv": self.species_msae_csv(),
        }
        paths = []
        for name, text in files.items():
            (out / name).write_text(text)
            paths.append(out / name)
        return paths


def fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([seed, fold_index]).generate_state(1)[0])


def run_fold(samples: Sequence[Sample], spec: FoldSpec, config: TrainConfig,
             registry: SpeciesRegistry = DEFAULT_REGISTRY) -> FoldResult:
    start = time.perf_counter()
    train_set = [s for s in samples if s.unit in spec.train_units]
    test_set = [s for s in samples if s.unit in spec.test_units]
    if not train_set or not test_set:
        raise CoverheadError(f"fold {spec.fold_index} has an empty train or test split")
    stats = fit_normalizer([s.features for s in train_set])
    means = species_means([s.target for s in train_set])
    cfg = config.replace(seed=fold_seed(config.seed, spec.fold_index))
    params, history = train([(s.features, s.target) for s in train_set], cfg, registry, stats)
    preds = np.array([predict(s.features, params, stats) for s in test_set])
    targets = np.array([s.target for s in test_set])
    report = evaluate(preds, targets, means)
    train_mean = np.mean([s.target for s in train_set], axis=0)
    constant = evaluate(np.broadcast_to(train_mean, targets.shape), targets, means).mae
    log.info("fold %d test units %s: MAE %.3f (constant %.3f)", spec.fold_index, spec.test_units, report.mae, constant)
    return FoldResult(spec, report, constant, means, stats, history,
                      [(s.unit, s.camera, s.week) for s in test_set], preds, targets,
                      time.perf_counter() - start)


_SHARED: dict = {}


def _fold_worker(index: int) -> FoldResult:
    return run_fold(_SHARED["samples"], _SHARED["folds"][index], _SHARED["config"], _SHARED["registry"])


def default_workers() -> int:
    env = os.environ.get("COVERHEAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CoverheadError(f"COVERHEAD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_cv(samples: Sequence[Sample], folds: Sequence[FoldSpec], config: TrainConfig = TrainConfig(),
           registry: SpeciesRegistry = DEFAULT_REGISTRY, workers: int | None = None) -> CvReport:
    """Train and evaluate every fold; normaliser and scaling means come from each train split."""
    known = {s.unit for s in samples}
    for spec in folds:
        missing = set(spec.test_units) - known
        if missing:
            raise CoverheadError(f"fold {spec.fold_index} references unknown units {sorted(missing)}")
    workers = min(workers or default_workers(), len(folds))
    if workers > 1 and "fork" in multiprocessing.get_all_start_methods():
        # forked workers inherit the samples instead of receiving pickled copies
        _SHARED.update(samples=samples, folds=list(folds), config=config, registry=registry)
        try:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                results = pool.map(_fold_worker, range(len(folds)))
        finally:
            _SHARED.clear()
    else:
        results = [run_fold(samples, spec, config, registry) for spec in folds]
    return assemble_report(results, registry)


def assemble_report(results: list[FoldResult], registry: SpeciesRegistry = DEFAULT_REGISTRY) -> CvReport:
    averaged = average_reports(r.report for r in results)
    preds = np.vstack([r.preds for r in results])
    targets = np.vstack([r.targets for r in results])
    weeks = np.array([k[2] for r in results for k in r.keys])
    scale = np.vstack([np.broadcast_to(r.means.values, r.preds.shape) for r in results])
    table = weekwise_error(preds, targets, weeks, scale)
    mean_cover = averaged.species_means
    try:
        corr = cover_error_correlation(mean_cover, averaged.per_species_msae)
    except CoverheadError:
        corr = None
    return CvReport(
        folds=results,
        averaged=averaged,
        constant_mae=float(np.mean([r.constant_mae for r in results])),
        weeks=table,
        species_msae=averaged.per_species_msae,
        species_mean_cover=mean_cover,
        correlation=corr,
        registry=registry,
    )
