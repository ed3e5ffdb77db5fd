"""Health statistics ingestion, Kessler-10 scoring and risk discretization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .projection import RdPoint, Wgs84Point, reproject_rd_to_wgs84, reproject_wgs84_to_rd

__all__ = [
    "KesslerSpec", "RiskBins", "NeighborhoodRecord", "MergeResult", "RISK_CLASSES",
    "KESSLER", "RISK_BINS", "kessler_high_risk", "neighborhood_risk_percent",
    "discretize_risk", "risk_level", "merge_health_geometry", "read_health_csv",
    "read_geojson", "write_records_jsonl", "read_records_jsonl",
    "RdPoint", "Wgs84Point", "reproject_rd_to_wgs84", "reproject_wgs84_to_rd",
]

RISK_CLASSES = ("very_low", "low", "moderate", "high_very_high")
RISK_LEVELS = ("very_low", "low", "moderate", "high", "very_high")

Ring = list  # list of (lat, lon) tuples, closed
Polygon = list  # exterior ring followed by hole rings
MultiPolygon = list  # list of Polygon


@dataclass(frozen=True)
class KesslerSpec:
    num_questions: int = 10
    item_min: int = 1
    item_max: int = 5
    high_risk_low: int = 30
    high_risk_high: int = 50

    def __post_init__(self):
        if self.num_questions * self.item_max != self.high_risk_high:
            raise ValidationError("upper high-risk bound must equal the maximal total score")
        if self.high_risk_low > self.high_risk_high:
            raise ValidationError("high-risk bounds are inverted")


@dataclass(frozen=True)
class RiskBins:
    """Uniform-width bins over the observed range of the risk percentage.

    The top two of the five bins are merged into one class, so edges has four
    entries but only the first three separate classes.
    """

    lower_bound: float = 1.0
    upper_bound: float = 22.9
    bin_count: int = 5
    class_names: tuple = RISK_CLASSES

    @property
    def width(self) -> float:
        return round((self.upper_bound - self.lower_bound) / self.bin_count, 10)

    @property
    def edges(self) -> tuple:
        # Upper (inclusive) edges of the first bin_count - 1 bins, on the
        # 2-decimal grid the bins are reported on.
        return tuple(round(self.lower_bound + k * self.width, 2) for k in range(1, self.bin_count))


KESSLER = KesslerSpec()
RISK_BINS = RiskBins()


def kessler_high_risk(answers: Sequence[int], spec: KesslerSpec = KESSLER) -> bool:
    if len(answers) != spec.num_questions:
        raise ValidationError(f"expected {spec.num_questions} answers, got {len(answers)}")
    for a in answers:
        if isinstance(a, bool) or int(a) != a or not spec.item_min <= a <= spec.item_max:
            raise ValidationError(f"item score {a!r} outside [{spec.item_min}, {spec.item_max}]")
    total = sum(int(a) for a in answers)
    return spec.high_risk_low <= total <= spec.high_risk_high


def neighborhood_risk_percent(respondent_answers: Iterable[Sequence[int]], spec: KesslerSpec = KESSLER) -> float:
    flags = [kessler_high_risk(a, spec) for a in respondent_answers]
    if not flags:
        raise ValidationError("at least one respondent is required")
    return 100.0 * sum(flags) / len(flags)


def risk_level(percent: float, bins: RiskBins = RISK_BINS) -> int:
    """Five-level bin index (0..4) before merging the top two levels."""
    if not percent >= 0 or math.isinf(percent):
        raise ValidationError(f"risk percent must be finite and non-negative, got {percent!r}")
    for k, edge in enumerate(bins.edges):
        if percent <= edge:
            return k
    return bins.bin_count - 1


def discretize_risk(percent: float, bins: RiskBins = RISK_BINS) -> int:
    """Ordinal class 0..3 with the two highest levels merged."""
    return min(risk_level(percent, bins), len(bins.class_names) - 1)


@dataclass
class NeighborhoodRecord:
    code: str
    risk_percent: float
    polygon: MultiPolygon
    risk_class: int = -1

    def __post_init__(self):
        if not 0.0 <= self.risk_percent <= 100.0:
            raise ValidationError(f"{self.code}: risk percent {self.risk_percent} outside [0, 100]")
        expected = discretize_risk(self.risk_percent)
        if self.risk_class == -1:
            self.risk_class = expected
        elif self.risk_class != expected:
            raise ValidationError(f"{self.code}: risk_class {self.risk_class} inconsistent with {self.risk_percent}%")
        self.polygon = [_check_polygon(self.code, poly) for poly in self.polygon]
        if not self.polygon:
            raise ValidationError(f"{self.code}: empty geometry")

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "risk_percent": self.risk_percent,
            "risk_class": self.risk_class,
            "polygon": [[[list(v) for v in ring] for ring in poly] for poly in self.polygon],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NeighborhoodRecord":
        return cls(d["code"], float(d["risk_percent"]), d["polygon"], int(d.get("risk_class", -1)))


def _check_polygon(code, poly):
    rings = []
    for ring in poly:
        ring = [(float(v[0]), float(v[1])) for v in ring]
        if len(ring) < 2 or ring[0] != ring[-1]:
            raise ValidationError(f"{code}: polygon ring is not closed")
        if len(set(ring)) < 3:
            raise ValidationError(f"{code}: polygon ring has fewer than 3 distinct vertices")
        rings.append(ring)
    if not rings:
        raise ValidationError(f"{code}: polygon without rings")
    return rings


@dataclass
class MergeResult:
    records: list
    unmatched_health: list = field(default_factory=list)
    unmatched_geometry: list = field(default_factory=list)

    @property
    def unmatched(self) -> list:
        return sorted(set(self.unmatched_health) | set(self.unmatched_geometry))


def _unique_mapping(rows, what):
    if isinstance(rows, Mapping):
        return dict(rows)
    out = {}
    for code, value in rows:
        if code in out:
            raise ValidationError(f"duplicate code {code!r} in {what} table")
        out[code] = value
    return out


def merge_health_geometry(health_rows, polygons) -> MergeResult:
    """Inner join of risk percentages and geometries on neighborhood code.

    Both inputs are either mappings ``code -> value`` or iterables of
    ``(code, value)`` pairs; in the latter case duplicate codes are rejected.
    Codes present on only one side are reported in the result.
    """
    health = _unique_mapping(health_rows, "health")
    geometry = _unique_mapping(polygons, "geometry")
    records = [
        NeighborhoodRecord(code, float(health[code]), geometry[code])
        for code in sorted(health.keys() & geometry.keys())
    ]
    return MergeResult(
        records=records,
        unmatched_health=sorted(health.keys() - geometry.keys()),
        unmatched_geometry=sorted(geometry.keys() - health.keys()),
    )


def read_health_csv(path) -> list:
    """Read ``code,risk_percent`` rows; returns a list of (code, percent) pairs."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"code", "risk_percent"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing column(s) {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                pct = float(row["risk_percent"])
            except ValueError as exc:
                raise ValidationError(f"{path}:{line_no}: bad risk_percent {row['risk_percent']!r}") from exc
            rows.append((row["code"].strip(), pct))
    return rows


def _ring_to_latlon(ring, crs):
    if crs == "EPSG:4326":
        return [(float(c[1]), float(c[0])) for c in ring]
    if crs == "EPSG:28992":
        pts = [reproject_rd_to_wgs84(RdPoint(float(c[0]), float(c[1]))) for c in ring]
        return [(p.lat, p.lon) for p in pts]
    raise ValidationError(f"unsupported CRS {crs!r}; use EPSG:4326 or EPSG:28992")


def read_geojson(path, crs: str = "EPSG:4326") -> list:
    """Read a FeatureCollection into (code, multipolygon) pairs in (lat, lon) order."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a GeoJSON FeatureCollection")
    out = []
    for feat in doc.get("features", []):
        code = (feat.get("properties") or {}).get("code")
        if code is None:
            raise ValidationError(f"{path}: feature without 'code' property")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            polys = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise ValidationError(f"{path}: feature {code} has unsupported geometry {geom.get('type')!r}")
        out.append((str(code), [[_ring_to_latlon(r, crs) for r in poly] for poly in polys]))
    return out


def write_records_jsonl(records, path, meta=None) -> None:
    from .artifacts import write_jsonl

    write_jsonl(path, (r.to_dict() for r in records), meta=meta)


def read_records_jsonl(path) -> list:
    from .artifacts import read_jsonl

    _, rows = read_jsonl(path)
    return [NeighborhoodRecord.from_dict(r) for r in rows]
