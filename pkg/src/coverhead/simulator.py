"""Synthetic EcoUnit time series with exact, occlusion-ignored ground truth.

Plants are clusters of leaves; each leaf is a filled rotated ellipse. Leaves
grow logistically, decline after the senescence onset, and a fraction of them
turn into Dead_litter, keeping their geometry and most of their colour.
Later leaves in a scene's list are drawn on top of earlier ones.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from coverhead.core import (
    DEAD_LITTER,
    DEFAULT_REGISTRY,
    Annotation,
    ConfigError,
    DomainError,
    ParseError,
    schmidt_quantize,
)

N_SPECIES = DEFAULT_REGISTRY.count

# Leaf counts per species; approximates the dataset-wide abundance ranking
# (Tri_pra dominant at about one third, Ach_mil rarest).
DEFAULT_MIXTURE = (0.03, 0.08, 0.10, 0.07, 0.10, 0.06, 0.44, 0.12, 0.0)

# (hue in degrees, saturation, value) per species, then soil.
_SPECIES_HSV = (
    (170, 0.35, 0.80),  # Ach_mil
    (285, 0.50, 0.62),  # Cen_jac
    (52, 0.80, 0.85),   # Lot_cor
    (85, 0.70, 0.55),   # Med_lup
    (145, 0.60, 0.45),  # Pla_lan
    (20, 0.70, 0.80),   # Sco_aut
    (115, 0.50, 0.70),  # Tri_pra
    (70, 0.55, 0.62),   # Grasses
    (32, 0.35, 0.58),   # Dead_litter
)
_SOIL_HSV = (25, 0.45, 0.30)
WALL_RGB = (150, 150, 156)
# share of the litter colour in a dead leaf; the rest stays the original species colour
LITTER_BLEND = 0.65


def _hsv_rgb(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h / 360.0, s, v)) * 255.0


SPECIES_RGB = np.array([_hsv_rgb(*hsv) for hsv in _SPECIES_HSV])
SOIL_RGB = _hsv_rgb(*_SOIL_HSV)


@dataclass(frozen=True)
class SimConfig:
    n_units: int = 24
    n_cameras: int = 2
    n_weeks: int = 18
    width: int = 192
    height: int = 96
    wall_thickness: int = 6
    mixture: tuple[float, ...] = DEFAULT_MIXTURE
    # Dirichlet concentration of per-unit species mixtures around ``mixture``
    mixture_concentration: float = 40.0
    plants_per_scene: float = 40.0
    unit_density_sd: float = 0.3
    leaves_per_plant: float = 5.0
    plant_spread: float = 7.0
    # max leaf semi-axis range in pixels at the reference width of 192 px
    leaf_radius_min: float = 5.0
    leaf_radius_max: float = 12.0
    leaf_aspect_min: float = 0.45
    growth_midpoint: float = 5.0
    growth_midpoint_sd: float = 1.0
    growth_scale: float = 1.1
    senescence_onset: int = 14
    senescence_fraction: float = 0.5
    decline_rate: float = 0.07
    litter_shrink: float = 0.08
    # 0 keeps leaf positions fixed; r > 0 moves each leaf toward a partner
    # leaf of another species, reaching fraction r of the way at the last week
    overlap_ramp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mixture", tuple(float(m) for m in self.mixture))
        self.validate()

    def validate(self) -> None:
        if self.n_units < 1:
            raise ConfigError("n_units", "must be >= 1")
        if self.n_cameras < 1:
            raise ConfigError("n_cameras", "must be >= 1")
        if not 1 <= self.n_weeks <= 18:
            raise ConfigError("n_weeks", "must be in [1, 18]")
        if self.width < 64 or self.height < 32:
            raise ConfigError("width" if self.width < 64 else "height", "image must be at least 64x32")
        if self.wall_thickness < 0 or 2 * self.wall_thickness >= min(self.width, self.height):
            raise ConfigError("wall_thickness", "must leave a non-empty interior")
        if len(self.mixture) != N_SPECIES:
            raise ConfigError("mixture", f"expected {N_SPECIES} weights, got {len(self.mixture)}")
        if any(m < 0 for m in self.mixture) or abs(sum(self.mixture) - 1.0) > 1e-9:
            raise ConfigError("mixture", "weights must be non-negative and sum to 1")
        if self.mixture_concentration <= 0:
            raise ConfigError("mixture_concentration", "must be > 0")
        if self.plants_per_scene <= 0 or self.leaves_per_plant < 1:
            raise ConfigError("plants_per_scene", "need positive plant and leaf counts")
        if not 0 < self.leaf_radius_min <= self.leaf_radius_max:
            raise ConfigError("leaf_radius_min", "need 0 < leaf_radius_min <= leaf_radius_max")
        if not 0 < self.leaf_aspect_min <= 1:
            raise ConfigError("leaf_aspect_min", "must be in (0, 1]")
        if self.growth_scale <= 0:
            raise ConfigError("growth_scale", "must be > 0")
        if not 1 <= self.senescence_onset <= 18:
            raise ConfigError("senescence_onset", "must be in [1, 18]")
        for name in ("senescence_fraction", "decline_rate", "litter_shrink"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(name, "must be in [0, 1]")
        if not 0 <= self.overlap_ramp < 1:
            raise ConfigError("overlap_ramp", "must be in [0, 1)")
        for name in ("unit_density_sd", "plant_spread", "growth_midpoint_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")

    def replace(self, **changes) -> "SimConfig":
        return SimConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class LeafInstance:
    species: int
    center: tuple[float, float]
    radii: tuple[float, float]
    angle: float
    color_seed: int
    # species before senescence; equals ``species`` for living leaves
    origin: int | None = None

    def __post_init__(self):
        if not 0 <= self.species < N_SPECIES:
            raise DomainError(f"species index {self.species} out of range")
        if self.radii[0] <= 0 or self.radii[1] <= 0:
            raise DomainError(f"leaf radii must be positive, got {self.radii}")
        if self.origin is None:
            object.__setattr__(self, "origin", self.species)

    def footprint(self, width: int, height: int):
        """Return ``(ys, xs, mask)``: bounding-box slices and the inside test over that box.

        Pixel (x, y) belongs to the leaf when its centre (x, y) satisfies the
        rotated ellipse inequality.
        """
        cx, cy = self.center
        rx, ry = self.radii
        c, s = math.cos(self.angle), math.sin(self.angle)
        ext_x = math.sqrt((rx * c) ** 2 + (ry * s) ** 2)
        ext_y = math.sqrt((rx * s) ** 2 + (ry * c) ** 2)
        x0 = max(0, math.ceil(cx - ext_x))
        x1 = min(width - 1, math.floor(cx + ext_x))
        y0 = max(0, math.ceil(cy - ext_y))
        y1 = min(height - 1, math.floor(cy + ext_y))
        if x1 < x0 or y1 < y0:
            return slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)
        dx = np.arange(x0, x1 + 1, dtype=float)[None, :] - cx
        dy = np.arange(y0, y1 + 1, dtype=float)[:, None] - cy
        u = (dx * c + dy * s) / rx
        v = (-dx * s + dy * c) / ry
        return slice(y0, y1 + 1), slice(x0, x1 + 1), u * u + v * v <= 1.0

    def contains(self, x: float, y: float) -> bool:
        cx, cy = self.center
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - cx, y - cy
        u = (dx * c + dy * s) / self.radii[0]
        v = (-dx * s + dy * c) / self.radii[1]
        return u * u + v * v <= 1.0

    def color(self) -> np.ndarray:
        rng = np.random.default_rng(self.color_seed)
        base = SPECIES_RGB[self.origin]
        if self.species == DEAD_LITTER and self.origin != DEAD_LITTER:
            base = LITTER_BLEND * SPECIES_RGB[DEAD_LITTER] + (1 - LITTER_BLEND) * base
        jitter = 1.0 + rng.uniform(-0.06, 0.06, size=3)
        return np.clip(np.rint(base * jitter), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    wall_thickness: int
    leaves: tuple[LeafInstance, ...] = ()
    week: int = 1

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(self.leaves))
        if self.width < 1 or self.height < 1:
            raise DomainError(f"scene size must be positive, got {self.width}x{self.height}")
        if self.wall_thickness < 0:
            raise DomainError("wall_thickness must be >= 0")

    @property
    def wall_mask(self) -> np.ndarray:
        t = self.wall_thickness
        mask = np.ones((self.height, self.width), dtype=bool)
        mask[t:self.height - t, t:self.width - t] = False
        return mask


@dataclass(frozen=True)
class GroundTruthAreas:
    plant: np.ndarray
    uncovered: np.ndarray
    relevant: int


@dataclass
class EcoUnitSeries:
    unit_id: int
    config: SimConfig
    # scenes[camera][week - 1]
    scenes: list[list[Scene]] = field(default_factory=list)

    @property
    def n_cameras(self) -> int:
        return len(self.scenes)


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _camera_scenes(config: SimConfig, unit_mix: np.ndarray, density: float, rng: np.random.Generator) -> list[Scene]:
    W, H, t = config.width, config.height, config.wall_thickness
    scale = W / 192.0
    lo_x, hi_x = t, W - 1 - t
    lo_y, hi_y = t, H - 1 - t
    n_plants = max(1, int(rng.poisson(config.plants_per_scene * density)))
    leaves = []  # static leaf attributes
    for _ in range(n_plants):
        species = int(rng.choice(N_SPECIES, p=unit_mix))
        px, py = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        mid = rng.normal(config.growth_midpoint, config.growth_midpoint_sd)
        n_leaves = 1 + int(rng.poisson(config.leaves_per_plant - 1))
        for _ in range(n_leaves):
            cx = float(np.clip(px + rng.normal(0, config.plant_spread * scale), lo_x, hi_x))
            cy = float(np.clip(py + rng.normal(0, config.plant_spread * scale), lo_y, hi_y))
            rmax = rng.uniform(config.leaf_radius_min, config.leaf_radius_max) * scale
            aspect = rng.uniform(config.leaf_aspect_min, 1.0)
            dies = species != DEAD_LITTER and rng.random() < config.senescence_fraction
            dies = dies and config.senescence_onset <= config.n_weeks
            death = int(rng.integers(config.senescence_onset, config.n_weeks + 1)) if dies else None
            leaves.append(dict(
                species=species, cx=cx, cy=cy, rx=rmax, ry=rmax * aspect,
                angle=float(rng.uniform(0, math.pi)), mid=mid,
                color_seed=int(rng.integers(2**31)), death=death,
                height=float(rng.random()),
            ))
    leaves.sort(key=lambda leaf: leaf["height"])
    if config.overlap_ramp > 0:
        # drawn only when needed so ramp-free datasets keep their random stream
        for leaf in leaves:
            others = [o for o in leaves if o["species"] != leaf["species"]]
            partner = others[int(rng.integers(len(others)))] if others else leaf
            leaf["tx"], leaf["ty"] = partner["cx"], partner["cy"]

    scenes = []
    for week in range(1, config.n_weeks + 1):
        ramp = config.overlap_ramp * (week - 1) / max(1, config.n_weeks - 1)
        decline = (1.0 - config.decline_rate) ** max(0, week - config.senescence_onset)
        instances = []
        for leaf in leaves:
            growth = _logistic((week - leaf["mid"]) / config.growth_scale)
            factor = growth * decline
            species = leaf["species"]
            if leaf["death"] is not None and week >= leaf["death"]:
                species = DEAD_LITTER
                factor *= (1.0 - config.litter_shrink) ** (week - leaf["death"])
            factor = max(factor, 1e-6)
            cx, cy = leaf["cx"], leaf["cy"]
            if ramp > 0:
                cx += (leaf["tx"] - cx) * ramp
                cy += (leaf["ty"] - cy) * ramp
            instances.append(LeafInstance(
                species=species, center=(cx, cy),
                radii=(leaf["rx"] * factor, leaf["ry"] * factor),
                angle=leaf["angle"], color_seed=leaf["color_seed"], origin=leaf["species"],
            ))
        scenes.append(Scene(W, H, t, tuple(instances), week))
    return scenes


def generate_series(config: SimConfig, seed: int, unit_id: int = 0) -> EcoUnitSeries:
    """Generate all cameras and weeks of one EcoUnit; deterministic in (config, seed, unit_id)."""
    config.validate()
    rng = np.random.default_rng([seed, unit_id])
    mix = np.asarray(config.mixture)
    unit_mix = np.zeros_like(mix)
    pos = mix > 0
    unit_mix[pos] = rng.dirichlet(config.mixture_concentration * mix[pos] / mix[pos].sum())
    density = float(np.exp(rng.normal(0.0, config.unit_density_sd)))
    scenes = [_camera_scenes(config, unit_mix, density, rng) for _ in range(config.n_cameras)]
    return EcoUnitSeries(unit_id, config, scenes)


def generate_dataset(config: SimConfig, seed: int) -> list[EcoUnitSeries]:
    return [generate_series(config, seed, unit) for unit in range(config.n_units)]


def render(scene: Scene) -> np.ndarray:
    """Rasterise a scene into an (H, W, 3) uint8 RGB image."""
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    img[...] = np.rint(SOIL_RGB).astype(np.uint8)
    for leaf in scene.leaves:
        ys, xs, mask = leaf.footprint(scene.width, scene.height)
        if mask.size:
            img[ys, xs][mask] = leaf.color()
    img[scene.wall_mask] = WALL_RGB
    return img


def visible_labels(scene: Scene) -> np.ndarray:
    """Top-most species index per pixel; -1 for soil, -2 for wall."""
    labels = np.full((scene.height, scene.width), -1, dtype=np.int16)
    for leaf in scene.leaves:
        ys, xs, mask = leaf.footprint(scene.width, scene.height)
        if mask.size:
            labels[ys, xs][mask] = leaf.species
    labels[scene.wall_mask] = -2
    return labels


def species_masks(scene: Scene) -> np.ndarray:
    """Union footprint of each species, occluded pixels included: (S, H, W) bool."""
    masks = np.zeros((N_SPECIES, scene.height, scene.width), dtype=bool)
    for leaf in scene.leaves:
        ys, xs, mask = leaf.footprint(scene.width, scene.height)
        if mask.size:
            masks[leaf.species, ys, xs] |= mask
    return masks


def true_cover(scene: Scene) -> tuple[np.ndarray, GroundTruthAreas]:
    """Occlusion-ignored cover percentages over the non-wall pixels."""
    relevant = ~scene.wall_mask
    n_relevant = int(relevant.sum())
    if n_relevant == 0:
        raise DomainError("degenerate scene: no relevant (non-wall) pixels")
    masks = species_masks(scene)
    plant = (masks & relevant).sum(axis=(1, 2))
    uncovered = (~masks & relevant).sum(axis=(1, 2))
    cover = 100.0 * plant / n_relevant
    return cover, GroundTruthAreas(plant.astype(np.int64), uncovered.astype(np.int64), n_relevant)


def visible_cover(scene: Scene) -> np.ndarray:
    labels = visible_labels(scene)
    relevant = labels != -2
    n_relevant = int(relevant.sum())
    if n_relevant == 0:
        raise DomainError("degenerate scene: no relevant (non-wall) pixels")
    counts = np.bincount(labels[labels >= 0].ravel(), minlength=N_SPECIES)
    return 100.0 * counts / n_relevant


def occluded_fraction(scenes) -> float:
    """Share of the summed true plant area hidden under other species."""
    true_sum = sum(float(true_cover(s)[0].sum()) for s in scenes)
    vis_sum = sum(float(visible_cover(s).sum()) for s in scenes)
    return 0.0 if true_sum == 0 else 1.0 - vis_sum / true_sum


def annotate_series(series: EcoUnitSeries, noise_sd: float = 0.1, seed: int = 0) -> list[Annotation]:
    """Noisy, Schmidt-quantised annotations, one per camera and week.

    The noise is multiplicative, so absent species stay at zero.
    """
    if noise_sd < 0:
        raise DomainError(f"noise_sd must be >= 0, got {noise_sd}")
    rng = np.random.default_rng([seed, series.unit_id])
    out = []
    for camera, scenes in enumerate(series.scenes):
        for scene in scenes:
            cover, _ = true_cover(scene)
            noisy = cover * (1.0 + rng.normal(0.0, noise_sd, size=cover.shape)) if noise_sd > 0 else cover
            noisy = np.clip(noisy, 0.0, 100.0)
            out.append(Annotation(series.unit_id, camera, scene.week, tuple(schmidt_quantize(c) for c in noisy)))
    return out


# --- JSON persistence ---------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "wall_thickness": scene.wall_thickness,
        "week": scene.week,
        "leaves": [
            {
                "species": leaf.species,
                "origin": leaf.origin,
                "center": list(leaf.center),
                "radii": list(leaf.radii),
                "angle": leaf.angle,
                "color_seed": leaf.color_seed,
            }
            for leaf in scene.leaves
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        leaves = tuple(
            LeafInstance(
                species=int(leaf["species"]),
                center=tuple(float(v) for v in leaf["center"]),
                radii=tuple(float(v) for v in leaf["radii"]),
                angle=float(leaf["angle"]),
                color_seed=int(leaf["color_seed"]),
                origin=int(leaf.get("origin", leaf["species"])),
            )
            for leaf in d["leaves"]
        )
        return Scene(int(d["width"]), int(d["height"]), int(d["wall_thickness"]), leaves, int(d["week"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed scene document: {exc!r}") from None


def series_to_dict(series: EcoUnitSeries) -> dict:
    return {
        "format_version": 1,
        "unit_id": series.unit_id,
        "config": {f.name: getattr(series.config, f.name) for f in fields(SimConfig)},
        "cameras": [[scene_to_dict(s) for s in cam] for cam in series.scenes],
    }


def series_from_dict(d: dict) -> EcoUnitSeries:
    try:
        config = SimConfig(**d["config"])
        scenes = [[scene_from_dict(s) for s in cam] for cam in d["cameras"]]
        return EcoUnitSeries(int(d["unit_id"]), config, scenes)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed series document: {exc!r}") from None


def write_series(path, series: EcoUnitSeries) -> None:
    Path(path).write_text(json.dumps(series_to_dict(series), sort_keys=True))


def read_series(path) -> EcoUnitSeries:
    try:
        return series_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
