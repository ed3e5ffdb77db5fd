"""Synthetic registries, health tables and image fixtures for offline runs and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geodata import RISK_BINS, NeighborhoodRecord
from .projection import Wgs84Point

FULL_SCALE_POPULATIONS = {0: 7960, 1: 4043, 2: 944, 3: 119}

# Class-specific base colours for mock imagery, from rural green to grey built-up.
CLASS_COLORS = {
    0: (0.30, 0.62, 0.28),
    1: (0.48, 0.56, 0.36),
    2: (0.58, 0.50, 0.46),
    3: (0.66, 0.44, 0.56),
}

# Synthetic neighborhoods are laid out on an RD grid starting here (metres).
RD_ORIGIN = (120000.0, 430000.0)


def class_percent_ranges(bins=RISK_BINS) -> dict:
    edges = (bins.lower_bound,) + bins.edges[:3]
    ranges = {c: (edges[c] + (0.01 if c else 0.0), edges[c + 1]) for c in range(3)}
    ranges[3] = (edges[3] + 0.01, bins.upper_bound)
    return ranges


def _square(lat, lon, size):
    return [[(lat, lon), (lat, lon + size), (lat + size, lon + size), (lat + size, lon), (lat, lon)]]


def synthetic_registry(populations=FULL_SCALE_POPULATIONS, seed: int = 0, cell_deg: float = 0.005) -> list:
    """Square neighborhoods on a lat/lon grid with risk percents drawn inside each class range."""
    rng = np.random.default_rng(seed)
    ranges = class_percent_ranges()
    total = sum(populations.values())
    cols = int(np.ceil(np.sqrt(total)))
    records, k = [], 0
    for c in sorted(populations):
        lo, hi = ranges[c]
        for _ in range(populations[c]):
            pct = round(float(rng.uniform(lo, hi)), 2)
            row, col = divmod(k, cols)
            poly = _square(51.5 + row * cell_deg, 4.5 + col * cell_deg, cell_deg * 0.9)
            records.append(NeighborhoodRecord(f"BU{k:08d}", pct, [poly]))
            k += 1
    return records


def rd_grid_features(populations, seed: int = 0, cell_m: float = 400.0) -> tuple:
    """Health rows and GeoJSON features (RD New metres) for a synthetic region."""
    rng = np.random.default_rng(seed)
    ranges = class_percent_ranges()
    total = sum(populations.values())
    cols = int(np.ceil(np.sqrt(total)))
    order = np.concatenate([np.full(populations[c], c) for c in sorted(populations)])
    order = order[rng.permutation(len(order))]
    health, features = [], []
    x0, y0 = RD_ORIGIN
    for k, c in enumerate(order):
        lo, hi = ranges[int(c)]
        code = f"BU{k:08d}"
        health.append((code, round(float(rng.uniform(lo, hi)), 2)))
        row, col = divmod(k, cols)
        x, y = x0 + col * cell_m, y0 + row * cell_m
        s = cell_m * 0.95
        if k % 7 == 3:
            # some neighborhoods consist of two parts
            half = s / 2 - 5
            geom = {"type": "MultiPolygon", "coordinates": [
                [[[x, y], [x + s, y], [x + s, y + half], [x, y + half], [x, y]]],
                [[[x, y + half + 10], [x + s, y + half + 10], [x + s, y + s], [x, y + s], [x, y + half + 10]]],
            ]}
        else:
            geom = {"type": "Polygon", "coordinates": [[[x, y], [x + s, y], [x + s, y + s], [x, y + s], [x, y]]]}
        features.append({"type": "Feature", "properties": {"code": code}, "geometry": geom})
    return health, features


def scene_color_fn(records):
    """Colour function for :class:`MockProvider` keyed on the class of the containing neighborhood."""
    from .geometry import bbox, point_in_polygon

    index = []
    for r in records:
        boxes = [bbox(p) for p in r.polygon]
        index.append((r, min(b[0] for b in boxes), max(b[1] for b in boxes),
                      min(b[2] for b in boxes), max(b[3] for b in boxes)))

    def color(coord: Wgs84Point):
        for r, la0, la1, lo0, lo1 in index:
            if la0 <= coord.lat <= la1 and lo0 <= coord.lon <= lo1 and point_in_polygon(coord.lat, coord.lon, r.polygon):
                return CLASS_COLORS[r.risk_class]
        return (0.5, 0.5, 0.5)

    return color


def synthetic_image(label: int, rng: np.random.Generator, size: int = 512) -> np.ndarray:
    base = np.asarray(CLASS_COLORS[label])
    img = base[None, None, :] + rng.normal(0.0, 0.08, (size, size, 3))
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


FIXTURE_POPULATIONS = {0: 60, 1: 60, 2: 24, 3: 2}
FIXTURE_QUOTAS = ["0=50", "1=50", "2=20", "3=all"]  # 50 + 50 + 60 + 40 = 200 images

FIXTURE_CONFIG = """\
# Desk-scale pipeline configuration for the bundled synthetic fixture.
seed = 7

[paths]
health_csv = "health.csv"
geojson = "neighborhoods.geojson"
geojson_crs = "EPSG:28992"
cache_dir = "cache"
output_dir = "out"

[plan]
quota_overrides = {quotas}
max_attempts = 300
months = "5-9"
replacement = true

[provider]
kind = "mock"
rate_limit = 2000.0
coverage = 0.8

[split]
stratify = false
by_neighborhood = false

[train]
family = "vit_deit"
variant = "micro"
unfrozen_layers = 6
optimizer = "adam"
learning_rate = 0.001
dropout_p = 0.1
l2_lambda = 0.0001
max_epochs = 25
patience = 6
batch_size = 32
pretrained = false

[tune]
epochs = 3
use_best = false

[tune.grid]
learning_rate = [0.001, 0.005]
unfrozen_layers = [1, 6]

[explain]
top_k = 2
background = 50
shap_samples = 50
discard_ratio = 0.8
fusion = "mean"
shap_output = "logits"
"""


def write_fixture(out_dir, seed: int = 7, populations=FIXTURE_POPULATIONS, quotas=FIXTURE_QUOTAS) -> Path:
    """Write health CSV, RD GeoJSON and a pipeline config; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    health, features = rd_grid_features(populations, seed)
    with open(out / "health.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("code,risk_percent\n")
        for code, pct in health:
            fh.write(f"{code},{pct:.2f}\n")
    with open(out / "neighborhoods.geojson", "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)
    cfg = out / "pipeline.toml"
    cfg.write_text(FIXTURE_CONFIG.replace("seed = 7", f"seed = {seed}").format(quotas=json.dumps(list(quotas))))
    return cfg
