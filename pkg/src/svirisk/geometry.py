"""Planar polygon helpers operating on (lat, lon) rings.

Geometry nesting follows GeoJSON: a ring is a closed list of vertices, a
polygon is an exterior ring followed by holes, a multipolygon is a list of
polygons. Membership uses the even-odd rule over all rings of a polygon, with
points on an edge counted as inside.
"""

from __future__ import annotations

import math

import numpy as np

EARTH_RADIUS_M = 6371008.8


def _depth(geom) -> int:
    d = 0
    while isinstance(geom, (list, tuple, np.ndarray)) and len(geom) and not np.isscalar(geom):
        geom = geom[0]
        d += 1
    return d


def as_multipolygon(geom) -> list:
    """Lift a ring or polygon to multipolygon nesting."""
    d = _depth(geom)
    if d == 2:
        return [[geom]]
    if d == 3:
        return [geom]
    if d == 4:
        return list(geom)
    raise ValueError(f"cannot interpret geometry of nesting depth {d}")


def ring_signed_area(ring) -> float:
    a = np.asarray(ring, dtype=float)
    x, y = a[:, 1], a[:, 0]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def polygon_area(poly) -> float:
    """Area of a polygon with holes, in squared input units."""
    ext = abs(ring_signed_area(poly[0]))
    holes = sum(abs(ring_signed_area(r)) for r in poly[1:])
    return max(ext - holes, 0.0)


def bbox(poly):
    a = np.concatenate([np.asarray(r, dtype=float) for r in poly])
    return a[:, 0].min(), a[:, 0].max(), a[:, 1].min(), a[:, 1].max()


def points_in_polygon(lat, lon, poly) -> np.ndarray:
    """Vectorized even-odd test; boundary points count as inside."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    inside = np.zeros(lat.shape, dtype=bool)
    on_edge = np.zeros(lat.shape, dtype=bool)
    for ring in poly:
        r = np.asarray(ring, dtype=float)
        for (y1, x1), (y2, x2) in zip(r[:-1], r[1:]):
            cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
            within = (
                (lon >= min(x1, x2)) & (lon <= max(x1, x2)) & (lat >= min(y1, y2)) & (lat <= max(y1, y2))
            )
            on_edge |= within & (cross == 0)
            straddles = (y1 > lat) != (y2 > lat)
            if y2 != y1:
                x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
                inside ^= straddles & (lon < x_at)
    return inside | on_edge


def point_in_polygon(lat: float, lon: float, geom) -> bool:
    return any(bool(points_in_polygon(lat, lon, poly)[0]) for poly in as_multipolygon(geom))


def local_metric(lat, lon, lat0: float):
    """Equirectangular projection to metres around reference latitude ``lat0``."""
    k = math.pi / 180.0 * EARTH_RADIUS_M
    return np.asarray(lon, dtype=float) * k * math.cos(math.radians(lat0)), np.asarray(lat, dtype=float) * k
