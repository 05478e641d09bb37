"""Shared domain types: species registry, Schmidt quantizer, cover validation.

Cover values are percentages (0-100) everywhere outside the head's loss.
Because annotators ignore occlusion, a cover vector may sum to more than 100.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CoverheadError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(CoverheadError, ValueError):
    """Input outside the domain of an operation."""


class ConfigError(CoverheadError, ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericError(CoverheadError, ArithmeticError):
    """Non-finite values or degenerate quantities in a numeric routine."""


class ParseError(CoverheadError, ValueError):
    """Malformed file content."""


@dataclass(frozen=True)
class SpeciesRegistry:
    """Ordered species identifiers; the index into ``names`` is the species index."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ConfigError("names", "registry must contain at least one species")
        if any(not isinstance(n, str) or not n for n in names):
            raise ConfigError("names", "species names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ConfigError("names", f"duplicate species names in {names}")

    @property
    def count(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_list(self) -> list[str]:
        return list(self.names)

    @classmethod
    def from_list(cls, names: Iterable[str]) -> "SpeciesRegistry":
        return cls(tuple(names))


DEFAULT_REGISTRY = SpeciesRegistry(
    (
        "Ach_mil",
        "Cen_jac",
        "Lot_cor",
        "Med_lup",
        "Pla_lan",
        "Sco_aut",
        "Tri_pra",
        "Grasses",
        "Dead_litter",
    )
)
DEAD_LITTER = DEFAULT_REGISTRY.index("Dead_litter")

SCHMIDT_BINS: tuple[float, ...] = (
    0.0, 0.5, 1.0, 3.0, 5.0, 8.0, 10.0, 15.0, 20.0, 25.0,
    30.0, 40.0, 50.0, 60.0, 70.0, 75.0, 80.0, 90.0, 100.0,
)


def schmidt_quantize(p: float) -> float:
    """Snap a cover percentage to the nearest Schmidt bin; ties go to the lower bin."""
    p = float(p)
    if not (0.0 <= p <= 100.0):
        raise DomainError(f"cover percentage {p!r} outside [0, 100]")
    hi = bisect.bisect_left(SCHMIDT_BINS, p)
    if SCHMIDT_BINS[hi] == p:
        return SCHMIDT_BINS[hi]
    lo = hi - 1
    if p - SCHMIDT_BINS[lo] <= SCHMIDT_BINS[hi] - p:
        return SCHMIDT_BINS[lo]
    return SCHMIDT_BINS[hi]


def schmidt_quantize_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return np.vectorize(schmidt_quantize, otypes=[float])(arr) if arr.size else arr.copy()


@dataclass(frozen=True)
class CoverValidation:
    violations: tuple[tuple[int, float], ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


def validate_cover(values: Sequence[float]) -> CoverValidation:
    """Check each entry lies in [0, 100]. The sum is deliberately not bounded."""
    bad = []
    for i, v in enumerate(values):
        v = float(v)
        if not (0.0 <= v <= 100.0):
            bad.append((i, v))
    return CoverValidation(tuple(bad))


@dataclass(frozen=True)
class Annotation:
    unit: int
    camera: int
    week: int
    cover: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "cover", tuple(float(c) for c in self.cover))
        if not 1 <= self.week <= 18:
            raise DomainError(f"week {self.week} outside [1, 18]")
        check = validate_cover(self.cover)
        if not check:
            raise DomainError(f"invalid cover entries (index, value): {check.violations}")

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.unit, self.camera, self.week)


def annotations_to_csv(annotations: Iterable[Annotation], registry: SpeciesRegistry = DEFAULT_REGISTRY) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["unit", "camera", "week", *registry.names])
    for a in annotations:
        if len(a.cover) != registry.count:
            raise DomainError(f"annotation {a.key} has {len(a.cover)} values, registry has {registry.count}")
        writer.writerow([a.unit, a.camera, a.week, *(repr(c) for c in a.cover)])
    return buf.getvalue()


def write_annotations(path, annotations: Iterable[Annotation], registry: SpeciesRegistry = DEFAULT_REGISTRY) -> None:
    Path(path).write_text(annotations_to_csv(annotations, registry))


def read_annotations(path, registry: SpeciesRegistry | None = None) -> tuple[SpeciesRegistry, list[Annotation]]:
    """Parse an annotation CSV; returns the registry found in its header and the rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty annotation file") from None
        if header[:3] != ["unit", "camera", "week"]:
            raise ParseError(f"{path}: header must start with unit,camera,week, got {header[:3]}")
        found = SpeciesRegistry(tuple(header[3:]))
        if registry is not None and found != registry:
            raise ParseError(f"{path}: registry {found.names} does not match expected {registry.names}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                unit, camera, week = (int(x) for x in row[:3])
                cover = tuple(float(x) for x in row[3:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append(Annotation(unit, camera, week, cover))
    return found, rows


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def dataclass_from_kv(cls, values: dict[str, str]):
    """Build a dataclass instance from string values, coercing by each field's default type.

    Tuple-valued fields take comma-separated lists.
    """
    defaults = cls()
    kwargs = {}
    known = {f.name for f in fields(cls)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(key, f"unknown field for {cls.__name__}")
        default = getattr(defaults, key)
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {raw!r}")
                kwargs[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, tuple):
                elem = type(default[0]) if default else float
                kwargs[key] = tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
            elif default is None:
                kwargs[key] = int(raw)
            else:
                kwargs[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    return cls(**kwargs)
