"""Head optimisation: Adam, batch size 1, step learning-rate decay, horizontal flips."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from coverhead.core import DEFAULT_REGISTRY, ConfigError, SpeciesRegistry, dataclass_from_kv, parse_kv
from coverhead.features import FeatureMap, NormStats
from coverhead.head import HeadParams, cover_from_pixels, loss_and_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr0: float = 0.001
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (20, 30)
    batch_size: int = 1
    augment_hflip: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # arithmetic precision of the per-pixel pass during training
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0", "must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor", "must be in (0, 1]")
        if any(e < 2 for e in self.decay_epochs) or list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError("decay_epochs", "must be strictly increasing epochs >= 2")
        if self.batch_size != 1:
            raise ConfigError("batch_size", "only per-sample updates (batch size 1) are supported")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "Adam betas must be in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps", "must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")

    def learning_rate(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        n_decays = sum(1 for e in self.decay_epochs if epoch >= e)
        # dividing by the inverse factor keeps 1e-3 -> 1e-4 -> 1e-5 exact in floating point
        return self.lr0 / (1.0 / self.decay_factor) ** n_decays

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        return dataclass_from_kv(cls, parse_kv(text, source))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), str(path))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (theta, state)."""
    grad = np.asarray(grad, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    kappa: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "kappa", "seconds"])
        for i in range(len(self.loss)):
            w.writerow([i + 1, repr(self.loss[i]), repr(self.lr[i]), repr(self.kappa[i]), f"{self.seconds[i]:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [float(r["loss"]) for r in rows],
            [float(r["lr"]) for r in rows],
            [float(r["kappa"]) for r in rows],
            [float(r["seconds"]) for r in rows],
        )


def prepare_sample(fmap, stats: NormStats | None, flip: bool, dtype) -> np.ndarray:
    """Optionally mirror and normalise one map; returns (D, H*W) pixels in ``dtype``."""
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    if flip:
        data = data[:, :, ::-1]
    if stats is not None:
        mean = stats.mean.astype(dtype)[:, None, None]
        inv_std = (1.0 / stats.std).astype(dtype)[:, None, None]
        data = np.subtract(data, mean, dtype=dtype)
        data *= inv_std
    else:
        data = np.ascontiguousarray(data, dtype=dtype)
    return data.reshape(data.shape[0], -1)


def train(
    dataset: Sequence[tuple],
    config: TrainConfig = TrainConfig(),
    registry: SpeciesRegistry = DEFAULT_REGISTRY,
    normalization: NormStats | None = None,
    init: HeadParams | None = None,
) -> tuple[HeadParams, TrainHistory]:
    """Fit head parameters on ``(feature map, cover percentages)`` pairs.

    ``normalization``, when given, is applied to each map as it is visited so
    the normalised dataset never has to be held in memory. The optimised loss
    is the MAE on cover fractions; the history reports it in percentage points.
    """
    if not dataset:
        raise ConfigError("dataset", "training set is empty")
    depth = {(f.data if isinstance(f, FeatureMap) else np.asarray(f)).shape[0] for f, _ in dataset}
    if len(depth) != 1:
        raise ConfigError("dataset", f"inconsistent feature depths {sorted(depth)}")
    n_features = depth.pop()
    targets = [np.asarray(t, dtype=np.float64) for _, t in dataset]
    if any(t.shape != (registry.count,) for t in targets):
        raise ConfigError("dataset", f"every target needs {registry.count} species values")
    if normalization is not None and normalization.mean.shape != (n_features,):
        raise ConfigError("normalization", "statistics do not match feature depth")

    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else HeadParams.init(n_features, registry, rng)
    if params.n_features != n_features or params.registry != registry:
        raise ConfigError("init", "initial parameters do not match dataset dimensions")
    dtype = np.dtype(config.dtype)
    theta = params.to_vector()
    state = AdamState.zeros(theta.size)
    history = TrainHistory()
    n = len(dataset)

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lr = config.learning_rate(epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.augment_hflip else np.zeros(n, dtype=bool)
        total = 0.0
        for i in order:
            X = prepare_sample(dataset[i][0], normalization, bool(flips[i]), dtype)
            loss, _, grads = loss_and_grad(X, params, targets[i])
            total += loss
            # gradient of the fraction-scale loss
            theta, state = adam_step(theta, grads.to_vector() / 100.0, state, lr, config.beta1, config.beta2, config.eps)
            params = params.with_vector(theta)
        history.loss.append(total / n)
        history.lr.append(lr)
        history.kappa.append(params.kappa)
        history.seconds.append(time.perf_counter() - start)
    return params, history


def predict(fmap, params: HeadParams, normalization: NormStats | None = None, dtype=np.float64) -> np.ndarray:
    """Cover percentages for one (unnormalised) feature map."""
    X = prepare_sample(fmap, normalization, False, np.dtype(dtype))
    return cover_from_pixels(X, params)
