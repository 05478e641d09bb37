"""In-memory synthetic datasets: simulate, render, annotate, extract features."""

from __future__ import annotations

import numpy as np

from coverhead.evaluation import Sample
from coverhead.features import extract
from coverhead.simulator import SimConfig, annotate_series, generate_series, render


def build_samples(config: SimConfig = SimConfig(), seed: int = 42, noise_sd: float = 0.1,
                  radius: int = 3) -> list[Sample]:
    """One Sample per (unit, camera, week); targets are the noisy quantised annotations."""
    samples = []
    for unit in range(config.n_units):
        series = generate_series(config, seed, unit)
        annotations = {a.key: a for a in annotate_series(series, noise_sd, seed)}
        for camera, scenes in enumerate(series.scenes):
            for scene in scenes:
                ann = annotations[(unit, camera, scene.week)]
                samples.append(Sample(unit, camera, scene.week, extract(render(scene), radius),
                                      np.asarray(ann.cover)))
    return samples
