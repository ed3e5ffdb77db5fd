"""Class-balanced acquisition planning and coordinate sampling inside neighborhoods."""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, PlanningError, SamplingError, ValidationError
from .geodata import RISK_CLASSES, NeighborhoodRecord
from .geometry import as_multipolygon, bbox, local_metric, points_in_polygon, polygon_area
from .projection import Wgs84Point

IMAGES_PER_NEIGHBORHOOD = {0: 1, 1: 1, 2: 3, 3: 20}
NEIGHBORHOODS_PER_CLASS = {0: 2500, 1: 2500, 2: 833, 3: None}  # None: take every neighborhood

MAX_BBOX_DRAWS = 10_000
_DRAW_BATCH = 64


def class_index(name_or_index) -> int:
    if isinstance(name_or_index, str) and not name_or_index.isdigit():
        try:
            return RISK_CLASSES.index(name_or_index)
        except ValueError:
            raise ValidationError(f"unknown risk class {name_or_index!r}") from None
    idx = int(name_or_index)
    if idx not in IMAGES_PER_NEIGHBORHOOD:
        raise ValidationError(f"risk class index {idx} outside 0..3")
    return idx


def quota_for_class(risk_class) -> int:
    return IMAGES_PER_NEIGHBORHOOD[class_index(risk_class)]


@dataclass(frozen=True)
class QuotaPlan:
    neighborhoods: Mapping = field(default_factory=lambda: dict(NEIGHBORHOODS_PER_CLASS))
    images_per_neighborhood: Mapping = field(default_factory=lambda: dict(IMAGES_PER_NEIGHBORHOOD))

    def with_overrides(self, overrides: Sequence[str]) -> "QuotaPlan":
        """Apply ``class=neighborhoods`` or ``class=neighborhoods:images`` overrides.

        ``neighborhoods`` may be ``all``.
        """
        hoods = dict(self.neighborhoods)
        images = dict(self.images_per_neighborhood)
        for item in overrides:
            try:
                key, value = item.split("=", 1)
                count, _, per = value.partition(":")
            except ValueError:
                raise ValidationError(f"bad quota override {item!r}; expected class=count[:images]") from None
            c = class_index(key.strip())
            hoods[c] = None if count.strip() == "all" else int(count)
            if per:
                images[c] = int(per)
        return QuotaPlan(hoods, images)

    def expected_images(self, populations: Mapping) -> dict:
        out = {}
        for c, per in self.images_per_neighborhood.items():
            n = self.neighborhoods.get(c)
            out[c] = (populations.get(c, 0) if n is None else n) * per
        return out

    def to_dict(self) -> dict:
        return {
            "neighborhoods": {str(k): v for k, v in sorted(self.neighborhoods.items())},
            "images_per_neighborhood": {str(k): v for k, v in sorted(self.images_per_neighborhood.items())},
        }


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts_per_point: int = 300
    replacement_enabled: bool = True

    def __post_init__(self):
        if self.max_attempts_per_point < 1:
            raise ConfigurationError("max_attempts_per_point must be >= 1")


@dataclass
class SamplePoint:
    code: str
    coordinate: Wgs84Point
    attempt_index: int
    status: str  # planned | found | exhausted
    slot: int = 0
    pano_id: str | None = None
    capture_date: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lat"], d["lon"] = self.coordinate.lat, self.coordinate.lon
        del d["coordinate"]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        coord = Wgs84Point(d.pop("lat"), d.pop("lon"))
        return cls(coordinate=coord, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Selection:
    selected: dict  # class -> list of NeighborhoodRecord
    pool: dict  # class -> list of NeighborhoodRecord not selected

    def counts(self) -> dict:
        return {c: len(v) for c, v in self.selected.items()}


def class_populations(records) -> dict:
    pops = {c: 0 for c in IMAGES_PER_NEIGHBORHOOD}
    for r in records:
        pops[r.risk_class] += 1
    return pops


def select_neighborhoods(records, plan: QuotaPlan, rng_seed: int) -> Selection:
    """Uniform selection without replacement of the planned number of neighborhoods per class."""
    rng = np.random.default_rng(rng_seed)
    by_class = {c: [] for c in plan.images_per_neighborhood}
    for r in sorted(records, key=lambda r: r.code):
        by_class.setdefault(r.risk_class, []).append(r)
    selected, pool = {}, {}
    for c in sorted(by_class):
        members = by_class[c]
        want = plan.neighborhoods.get(c)
        if want is None:
            want = len(members)
        if want > len(members):
            raise PlanningError(
                f"class {RISK_CLASSES[c]} has {len(members)} neighborhoods, plan requests {want}",
                shortfall={c: want - len(members)},
            )
        order = rng.permutation(len(members))
        chosen = np.sort(order[:want])
        rest = order[want:]
        selected[c] = [members[i] for i in chosen]
        pool[c] = [members[i] for i in rest]
    return Selection(selected, pool)


def planned_image_counts(selection: Selection, plan: QuotaPlan) -> dict:
    return {c: len(v) * plan.images_per_neighborhood[c] for c, v in selection.selected.items()}


def neighborhood_rng(seed: int, code: str) -> np.random.Generator:
    """Independent stream per neighborhood so acquisition order does not matter."""
    return np.random.default_rng(int(seed) ^ zlib.crc32(code.encode("utf-8")))


def sample_point_in_polygon(polygon, rng: np.random.Generator, max_draws: int = MAX_BBOX_DRAWS) -> Wgs84Point:
    """Uniform point inside a (multi)polygon by bounding-box rejection.

    Parts of a multipolygon are chosen with probability proportional to area.
    """
    parts = as_multipolygon(polygon)
    areas = np.array([polygon_area(p) for p in parts])
    if not areas.sum() > 0:
        raise SamplingError("cannot sample from a zero-area polygon")
    part = parts[rng.choice(len(parts), p=areas / areas.sum())] if len(parts) > 1 else parts[0]
    lat0, lat1, lon0, lon1 = bbox(part)
    drawn = 0
    while drawn < max_draws:
        n = min(_DRAW_BATCH, max_draws - drawn)
        lat = rng.uniform(lat0, lat1, n)
        lon = rng.uniform(lon0, lon1, n)
        hits = np.flatnonzero(points_in_polygon(lat, lon, part))
        if hits.size:
            i = hits[0]
            return Wgs84Point(float(lat[i]), float(lon[i]))
        drawn += n
    raise SamplingError(f"no point inside polygon after {max_draws} bounding-box draws")


@dataclass
class AcquisitionResult:
    code: str
    risk_class: int
    points: list
    attempts: int
    status: str  # found | exhausted

    @property
    def found(self) -> list:
        return [p for p in self.points if p.status == "found"]


def acquire_with_retry(
    neighborhood: NeighborhoodRecord,
    images_needed: int,
    policy: RetryPolicy,
    probe: Callable,
    rng: np.random.Generator | None = None,
    log: Callable[[dict], None] | None = None,
    seed: int = 0,
) -> AcquisitionResult:
    """Fill ``images_needed`` slots, each with up to ``max_attempts_per_point`` probes.

    ``probe(coordinate)`` returns a falsy value when no acceptable imagery
    exists there; a truthy return may carry ``pano_id``/``capture_date``
    attributes which are copied onto the found point. As soon as one slot
    exhausts its budget the neighborhood is reported as exhausted.
    """
    if images_needed < 1:
        raise ValidationError("images_needed must be >= 1")
    rng = rng if rng is not None else neighborhood_rng(seed, neighborhood.code)
    points, total = [], 0
    for slot in range(images_needed):
        for attempt in range(1, policy.max_attempts_per_point + 1):
            coord = sample_point_in_polygon(neighborhood.polygon, rng)
            total += 1
            hit = probe(coord)
            if log is not None:
                log({
                    "code": neighborhood.code, "slot": slot, "attempt_index": attempt,
                    "lat": coord.lat, "lon": coord.lon, "found": bool(hit),
                })
            if hit:
                points.append(SamplePoint(
                    neighborhood.code, coord, attempt, "found", slot,
                    getattr(hit, "pano_id", None), getattr(hit, "capture_date", None),
                ))
                break
        else:
            points.append(SamplePoint(neighborhood.code, coord, policy.max_attempts_per_point, "exhausted", slot))
            return AcquisitionResult(neighborhood.code, neighborhood.risk_class, points, total, "exhausted")
    return AcquisitionResult(neighborhood.code, neighborhood.risk_class, points, total, "found")


def resample_replacements(exhausted, remaining_pool, rng_seed: int) -> dict:
    """Draw one same-class replacement per exhausted neighborhood.

    ``remaining_pool`` is a mapping class -> candidates or a flat list. Raises
    :class:`PlanningError` carrying the per-class shortfall and the partial
    replacements when the pool runs dry.
    """
    if isinstance(remaining_pool, Mapping):
        pool = {c: list(v) for c, v in remaining_pool.items()}
    else:
        pool = {}
        for r in remaining_pool:
            pool.setdefault(r.risk_class, []).append(r)
    pool_codes = {r.code for v in pool.values() for r in v}
    need = {}
    for r in exhausted:
        if r.code in pool_codes:
            raise ValidationError(f"exhausted neighborhood {r.code} is still in the replacement pool")
        need[r.risk_class] = need.get(r.risk_class, 0) + 1
    rng = np.random.default_rng(rng_seed)
    out, shortfall = {}, {}
    for c in sorted(need):
        cands = sorted(pool.get(c, []), key=lambda r: r.code)
        k = min(need[c], len(cands))
        idx = np.sort(rng.permutation(len(cands))[:k])
        out[c] = [cands[i] for i in idx]
        if need[c] > k:
            shortfall[c] = need[c] - k
    if shortfall:
        desc = ", ".join(f"{RISK_CLASSES[c]}: {n}" for c, n in shortfall.items())
        raise PlanningError(f"replacement pool exhausted; shortfall {desc}", shortfall=shortfall, partial=out)
    return out


@dataclass
class AcquisitionRun:
    results: dict  # code -> AcquisitionResult (final status per neighborhood)
    final_selection: dict  # class -> list of codes with all slots found
    rounds: list  # per round: class -> number of replacements drawn
    shortfall: dict

    def found_points(self) -> list:
        pts = []
        for c in sorted(self.final_selection):
            for code in self.final_selection[c]:
                pts.extend(self.results[code].found)
        return pts


def run_acquisition(
    selection: Selection,
    plan: QuotaPlan,
    policy: RetryPolicy,
    probe: Callable,
    seed: int,
    log: Callable[[dict], None] | None = None,
    workers: int = 1,
) -> AcquisitionRun:
    """Acquire every selected neighborhood, replacing exhausted ones until done or the pool is empty."""
    pool = {c: list(v) for c, v in selection.pool.items()}
    pending = [r for c in sorted(selection.selected) for r in selection.selected[c]]
    results, rounds, shortfall = {}, [], {}
    round_no = 0
    while pending:
        logs = {r.code: [] for r in pending}

        def work(rec):
            return acquire_with_retry(
                rec, plan.images_per_neighborhood[rec.risk_class], policy, probe,
                rng=neighborhood_rng(seed, rec.code), log=logs[rec.code].append,
            )

        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                batch = list(ex.map(work, pending))
        else:
            batch = [work(r) for r in pending]
        if log is not None:
            for rec in sorted(pending, key=lambda r: r.code):
                for entry in logs[rec.code]:
                    log(dict(entry, round=round_no))
        for res in batch:
            results[res.code] = res
        exhausted = [r for r, res in zip(pending, batch) if res.status == "exhausted"]
        if not exhausted or not policy.replacement_enabled:
            break
        round_no += 1
        try:
            repl = resample_replacements(exhausted, pool, seed + round_no)
        except PlanningError as err:
            repl = err.partial
            for c, n in err.shortfall.items():
                shortfall[c] = shortfall.get(c, 0) + n
        rounds.append({c: len(v) for c, v in repl.items()})
        used = {r.code for v in repl.values() for r in v}
        pool = {c: [r for r in v if r.code not in used] for c, v in pool.items()}
        pending = [r for c in sorted(repl) for r in repl[c]]
    final = {c: [] for c in selection.selected}
    for code in sorted(results):
        res = results[code]
        if res.status == "found":
            final[res.risk_class].append(code)
    return AcquisitionRun(results, final, rounds, shortfall)


@dataclass
class DispersionReport:
    n: int
    score: float | None
    observed_mean_nn: float | None
    expected_mean_nn: float | None
    flagged: bool
    skipped: bool = False
    notice: str = ""


def dispersion_diagnostic(points, polygon, threshold: float = 0.7, planar: bool = False) -> DispersionReport:
    """Clark-Evans nearest-neighbour ratio of the points relative to the polygon area.

    Values well below 1 indicate clustering; the report is flagged when the
    ratio falls under ``threshold``. With ``planar=False`` coordinates are
    (lat, lon) degrees and distances are computed in local metres.
    """
    coords = np.array([(p.lat, p.lon) if isinstance(p, Wgs84Point) else tuple(p) for p in points], dtype=float)
    n = len(coords)
    if n < 2:
        return DispersionReport(n, None, None, None, False, True, "fewer than 2 points; diagnostic skipped")
    parts = as_multipolygon(polygon)
    if planar:
        xy = coords[:, ::-1]
        area = sum(polygon_area(p) for p in parts)
    else:
        lat0 = float(coords[:, 0].mean())
        xy = np.column_stack(local_metric(coords[:, 0], coords[:, 1], lat0))
        area = 0.0
        for part in parts:
            proj = []
            for ring in part:
                r = np.asarray(ring, dtype=float)
                x, y = local_metric(r[:, 0], r[:, 1], lat0)
                proj.append(np.column_stack([y, x]))
            area += polygon_area(proj)
    if not area > 0:
        raise SamplingError("dispersion diagnostic needs a polygon with positive area")
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    observed = float(d.min(axis=1).mean())
    expected = 0.5 / math.sqrt(n / area)
    score = observed / expected
    return DispersionReport(n, score, observed, expected, score < threshold)
