"""MAE and species-scaled MSAE."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from coverhead.core import Annotation, CoverheadError

MEAN_FLOOR = 1e-6


@dataclass(frozen=True)
class SpeciesMeans:
    values: np.ndarray
    # True where the raw mean fell below MEAN_FLOOR and was raised to it
    floored: np.ndarray


def _cover_matrix(rows) -> np.ndarray:
    rows = list(rows)
    if rows and isinstance(rows[0], Annotation):
        rows = [a.cover for a in rows]
    return np.asarray(rows, dtype=np.float64)


def species_means(annotations) -> SpeciesMeans:
    """Per-species mean cover over a (training) set of annotations or cover vectors."""
    covers = _cover_matrix(annotations)
    if covers.size == 0:
        raise CoverheadError("species_means needs at least one annotation")
    raw = covers.mean(axis=0)
    floored = raw < MEAN_FLOOR
    return SpeciesMeans(np.where(floored, MEAN_FLOOR, raw), floored)


@dataclass
class MetricsReport:
    mae: float
    msae: float
    per_species_mae: np.ndarray
    per_species_msae: np.ndarray
    species_means: np.ndarray
    floored: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    # same error averaged over species per image first, then over images
    mae_image_first: float = float("nan")
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "msae": self.msae,
            "mae_image_first": self.mae_image_first,
            "n_images": self.n_images,
            "per_species_mae": [float(v) for v in self.per_species_mae],
            "per_species_msae": [float(v) for v in self.per_species_msae],
            "species_means": [float(v) for v in self.species_means],
            "floored": [bool(v) for v in self.floored],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_row(self, names) -> dict:
        row = {"mae": repr(self.mae), "msae": repr(self.msae), "n_images": self.n_images}
        for name, a, s in zip(names, self.per_species_mae, self.per_species_msae):
            row[f"mae_{name}"] = repr(float(a))
            row[f"msae_{name}"] = repr(float(s))
        return row

    def to_csv(self, names) -> str:
        row = self.csv_row(names)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()


def evaluate(preds, targets, means) -> MetricsReport:
    """Per-species and aggregate MAE/MSAE of predicted against target covers (n_images x S)."""
    preds = _cover_matrix(preds)
    targets = _cover_matrix(targets)
    if preds.shape != targets.shape:
        raise CoverheadError(f"prediction/target shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise CoverheadError("need a non-empty (n_images, S) prediction matrix")
    if isinstance(means, SpeciesMeans):
        floored, means = means.floored, means.values
    else:
        means = np.asarray(means, dtype=np.float64)
        floored = means < MEAN_FLOOR
        means = np.where(floored, MEAN_FLOOR, means)
    if means.shape != (preds.shape[1],):
        raise CoverheadError(f"species means have shape {means.shape}, expected ({preds.shape[1]},)")
    err = np.abs(preds - targets)
    per_mae = err.mean(axis=0)
    per_msae = per_mae / means
    return MetricsReport(
        mae=float(per_mae.mean()),
        msae=float(per_msae.mean()),
        per_species_mae=per_mae,
        per_species_msae=per_msae,
        species_means=means,
        floored=np.asarray(floored, dtype=bool),
        mae_image_first=float(err.mean(axis=1).mean()),
        n_images=preds.shape[0],
    )


def average_reports(reports) -> MetricsReport:
    """Arithmetic mean of every field over folds."""
    reports = list(reports)
    if not reports:
        raise CoverheadError("no reports to average")
    return MetricsReport(
        mae=float(np.mean([r.mae for r in reports])),
        msae=float(np.mean([r.msae for r in reports])),
        per_species_mae=np.mean([r.per_species_mae for r in reports], axis=0),
        per_species_msae=np.mean([r.per_species_msae for r in reports], axis=0),
        species_means=np.mean([r.species_means for r in reports], axis=0),
        floored=np.any([r.floored for r in reports], axis=0),
        mae_image_first=float(np.mean([r.mae_image_first for r in reports])),
        n_images=int(sum(r.n_images for r in reports)),
    )
