"""Per-pixel classification head, cover aggregation, MAE loss and its gradient.

For every pixel with feature vector f the head computes scores s = W f + b over
S species channels plus a background and an irrelevant channel, and

    P_p   = logistic(s_p)                       species are not mutually exclusive
    P_bio = sum_p P_p / (kappa + sum_p P_p)
    P_bg  = kappa / (kappa + sum_p P_p) * softmax(s_bg, s_irr)[0]
    P_irr = kappa / (kappa + sum_p P_p) * softmax(s_bg, s_irr)[1]

Summing over pixels gives the areas A_bio, A_bg, A_irr and

    cover_p = 100 * sum_xy P_p / (A_bio + A_bg).

kappa = softplus(kappa_raw) stays positive without constraints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coverhead.core import DEFAULT_REGISTRY, NumericError, ParseError, SpeciesRegistry
from coverhead.features import FeatureMap, NormStats

PARAMS_FORMAT_VERSION = 1
DENOMINATOR_FLOOR = 1e-12

# Segmentation palette: species in registry order, then background (black) and
# irrelevant (grey).
SPECIES_PALETTE = np.array(
    [
        (230, 230, 230),
        (148, 0, 211),
        (255, 215, 0),
        (50, 205, 50),
        (0, 100, 0),
        (255, 99, 71),
        (0, 191, 255),
        (189, 183, 107),
        (139, 69, 19),
    ],
    dtype=np.uint8,
)
BACKGROUND_RGB = (0, 0, 0)
IRRELEVANT_RGB = (128, 128, 128)


def logistic(x):
    # tanh form: stable for large |x| and faster than exp-based evaluation
    return 0.5 * np.tanh(0.5 * x) + 0.5


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class HeadParams:
    """Linear per-pixel head. Rows of ``W``/``b``: S species, then background, then irrelevant."""

    W: np.ndarray
    b: np.ndarray
    kappa_raw: float
    registry: SpeciesRegistry = DEFAULT_REGISTRY

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.kappa_raw = float(self.kappa_raw)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent shapes W{self.W.shape} b{self.b.shape}")
        if self.W.shape[0] != self.registry.count + 2:
            raise ValueError(
                f"W has {self.W.shape[0]} rows, expected {self.registry.count} species + 2"
            )

    @property
    def n_species(self) -> int:
        return self.registry.count

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    @property
    def kappa(self) -> float:
        return softplus(self.kappa_raw)

    @classmethod
    def init(cls, n_features: int, registry: SpeciesRegistry = DEFAULT_REGISTRY, rng=None, kappa: float = 1.0):
        rng = np.random.default_rng(rng)
        scale = 1.0 / math.sqrt(n_features)
        W = rng.uniform(-scale, scale, size=(registry.count + 2, n_features))
        return cls(W, np.zeros(registry.count + 2), inverse_softplus(kappa), registry)

    def copy(self) -> "HeadParams":
        return HeadParams(self.W.copy(), self.b.copy(), self.kappa_raw, self.registry)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, [self.kappa_raw]])

    def with_vector(self, theta: np.ndarray) -> "HeadParams":
        k, d = self.W.shape
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (k * d + k + 1,):
            raise ValueError(f"parameter vector has shape {theta.shape}, expected ({k * d + k + 1},)")
        return HeadParams(theta[: k * d].reshape(k, d).copy(), theta[k * d: k * d + k].copy(), theta[-1], self.registry)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.W).all() and np.isfinite(self.b).all() and math.isfinite(self.kappa_raw))


@dataclass
class HeadGrads:
    W: np.ndarray
    b: np.ndarray
    kappa_raw: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, [self.kappa_raw]])


@dataclass
class ProbabilityMaps:
    """Per-pixel probabilities; ``species`` has shape (S, H, W), the rest (H, W)."""

    species: np.ndarray
    bio: np.ndarray
    bg: np.ndarray
    irr: np.ndarray

    @property
    def height(self) -> int:
        return self.bio.shape[0]

    @property
    def width(self) -> int:
        return self.bio.shape[1]


@dataclass
class AggregateAreas:
    bio: float
    bg: float
    irr: float

    @property
    def total(self) -> float:
        return self.bio + self.bg + self.irr


@dataclass
class ForwardResult:
    maps: ProbabilityMaps
    areas: AggregateAreas
    cover: np.ndarray


def _as_planar(features) -> np.ndarray:
    data = features.data if isinstance(features, FeatureMap) else np.asarray(features)
    if data.ndim != 3:
        raise ValueError(f"features must be (D, H, W), got shape {data.shape}")
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float64)
    return data


class _Pass:
    """Forward intermediates over flattened pixels, shared by forward and backward."""

    def __init__(self, X: np.ndarray, params: HeadParams):
        if X.shape[0] != params.n_features:
            raise ValueError(f"features have {X.shape[0]} channels, params expect {params.n_features}")
        if not params.is_finite():
            raise NumericError("non-finite head parameters")
        dt = X.dtype
        S = params.n_species
        self.X = X
        self.kappa = dt.type(params.kappa)
        self.s = np.matmul(params.W.astype(dt), X)
        self.s += params.b.astype(dt)[:, None]
        self.P = np.multiply(self.s[:S], 0.5)
        np.tanh(self.P, out=self.P)
        self.P *= 0.5
        self.P += 0.5
        self.sigma = self.P.sum(axis=0)
        self.den = self.kappa + self.sigma
        self.r = self.kappa / self.den
        self.bio = self.sigma / self.den
        diff = self.s[S] - self.s[S + 1]
        self.q_bg = logistic(diff)
        self.q_irr = logistic(-diff)
        self.bg = self.r * self.q_bg
        self.irr = self.r * self.q_irr
        self.T = self.P.sum(axis=1).astype(np.float64)
        self.A_bio = float(self.bio.sum())
        self.A_bg = float(self.bg.sum())
        self.A_irr = float(self.irr.sum())
        self.denominator = self.A_bio + self.A_bg
        # non-finite features propagate into these sums (0 * inf is nan)
        if not math.isfinite(self.denominator + self.A_irr) or not np.isfinite(self.T).all():
            if not np.isfinite(X).all():
                raise NumericError("non-finite feature values")
            raise NumericError("non-finite intermediate in head forward pass")
        if self.denominator < DENOMINATOR_FLOOR:
            raise NumericError(
                f"degenerate cover denominator A_bio + A_bg = {self.denominator:.3e}; "
                "image predicted almost entirely irrelevant"
            )
        self.cover = 100.0 * self.T / self.denominator


def forward(features, params: HeadParams) -> ForwardResult:
    """Probability maps, aggregate areas and cover percentages for one image.

    ``features`` is a FeatureMap or a (D, H, W) array; computation runs in the
    array's float dtype.
    """
    data = _as_planar(features)
    d, h, w = data.shape
    fp = _Pass(data.reshape(d, h * w), params)
    maps = ProbabilityMaps(
        species=fp.P.reshape(params.n_species, h, w),
        bio=fp.bio.reshape(h, w),
        bg=fp.bg.reshape(h, w),
        irr=fp.irr.reshape(h, w),
    )
    return ForwardResult(maps, AggregateAreas(fp.A_bio, fp.A_bg, fp.A_irr), fp.cover)


def cover_from_pixels(X: np.ndarray, params: HeadParams) -> np.ndarray:
    """Cover percentages from a (D, N) array of pixel features."""
    return _Pass(X, params).cover


def loss_mae(predicted, target) -> float:
    """Mean absolute error over species, in percentage points."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"species count mismatch: {predicted.shape} vs {target.shape}")
    return float(np.mean(np.abs(predicted - target)))


def loss_and_grad(X: np.ndarray, params: HeadParams, target) -> tuple[float, np.ndarray, HeadGrads]:
    """MAE loss (percentage points), predicted cover and the exact gradient.

    ``X`` is a (D, N) array of pixel features. At an exactly zero residual the
    subgradient 0 is used.
    """
    fp = _Pass(X, params)
    S = params.n_species
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (S,):
        raise ValueError(f"target has shape {target.shape}, expected ({S},)")
    resid = fp.cover - target
    loss = float(np.mean(np.abs(resid)))
    g_cover = np.sign(resid) / S
    Dn = fp.denominator
    g_T = 100.0 * g_cover / Dn
    g_D = -float(np.dot(100.0 * g_cover, fp.T)) / (Dn * Dn)

    dt = X.dtype.type
    # A_bio + A_bg = sum over pixels of 1 - P_irr, with P_irr = kappa q_irr / (kappa + sigma)
    den2 = fp.den * fp.den
    g_sigma = dt(g_D) * fp.q_irr * fp.kappa / den2
    G = np.empty_like(fp.s)
    Gp = G[:S]
    np.subtract(1.0, fp.P, out=Gp)
    Gp *= fp.P
    Gp *= g_T.astype(X.dtype)[:, None] + g_sigma[None, :]
    G[S] = dt(g_D) * fp.r * fp.q_bg * fp.q_irr
    G[S + 1] = -G[S]
    g_kappa = -g_D * float((fp.q_irr * fp.sigma / den2).sum())

    # X @ G.T is the faster BLAS layout for (D, N) x (N, K)
    gW = (X @ G.T).T.astype(np.float64)
    gb = G.sum(axis=1).astype(np.float64)
    g_kraw = g_kappa * float(logistic(params.kappa_raw))
    if not (np.isfinite(gW).all() and np.isfinite(gb).all() and math.isfinite(g_kraw)):
        raise NumericError("non-finite gradient")
    return loss, fp.cover, HeadGrads(gW, gb, g_kraw)


def backward(features, params: HeadParams, target) -> HeadGrads:
    data = _as_planar(features)
    return loss_and_grad(data.reshape(data.shape[0], -1), params, target)[2]


def segmentation_map(maps: ProbabilityMaps) -> np.ndarray:
    """Label each pixel: argmax species where P_bio > 1/2, else background (S) or irrelevant (S+1).

    Ties resolve to the lower index.
    """
    S = maps.species.shape[0]
    species = np.argmax(maps.species, axis=0)
    residual = np.where(maps.bg >= maps.irr, S, S + 1)
    return np.where(maps.bio > 0.5, species, residual).astype(np.int32)


def segmentation_rgb(labels: np.ndarray, n_species: int) -> np.ndarray:
    palette = np.vstack([
        _palette(n_species),
        np.array([BACKGROUND_RGB, IRRELEVANT_RGB], dtype=np.uint8),
    ])
    return palette[labels]


def _palette(n_species: int) -> np.ndarray:
    if n_species <= len(SPECIES_PALETTE):
        return SPECIES_PALETTE[:n_species]
    rng = np.random.default_rng(n_species)
    extra = rng.integers(32, 224, size=(n_species - len(SPECIES_PALETTE), 3), dtype=np.uint8)
    return np.vstack([SPECIES_PALETTE, extra])


# --- persistence --------------------------------------------------------------

def params_to_dict(params: HeadParams, normalization: NormStats | None = None, extra: dict | None = None) -> dict:
    d = {
        "format_version": PARAMS_FORMAT_VERSION,
        "registry": params.registry.to_list(),
        "S": params.n_species,
        "D": params.n_features,
        "W": [float(v) for v in params.W.ravel()],
        "b": [float(v) for v in params.b],
        "kappa_raw": params.kappa_raw,
    }
    if normalization is not None:
        d["normalization"] = normalization.to_dict()
    if extra:
        d.update(extra)
    return d


def params_from_dict(d: dict) -> tuple[HeadParams, NormStats | None]:
    try:
        if d["format_version"] != PARAMS_FORMAT_VERSION:
            raise ParseError(f"unsupported params format version {d['format_version']}")
        registry = SpeciesRegistry(tuple(d["registry"]))
        S, D = int(d["S"]), int(d["D"])
        if S != registry.count:
            raise ParseError(f"S={S} does not match registry of {registry.count} species")
        W = np.asarray(d["W"], dtype=np.float64)
        if W.size != (S + 2) * D:
            raise ParseError(f"W has {W.size} values, expected {(S + 2) * D}")
        params = HeadParams(W.reshape(S + 2, D), d["b"], d["kappa_raw"], registry)
        norm = NormStats.from_dict(d["normalization"]) if "normalization" in d else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed params document: {exc!r}") from None
    return params, norm


def write_params(path, params: HeadParams, normalization: NormStats | None = None, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, normalization, extra), indent=1, sort_keys=True))


def read_params(path) -> tuple[HeadParams, NormStats | None]:
    try:
        return params_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
