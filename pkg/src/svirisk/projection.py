"""Conversion between Dutch RD New (EPSG:28992) and WGS84 (EPSG:4326).

RD New is an oblique stereographic ("double") projection of the Bessel 1841
ellipsoid. Going to WGS84 takes three steps: inverse projection to Bessel
geodetic coordinates, a 7-parameter Helmert shift between the geocentric
frames, and a geocentric-to-geodetic conversion on the WGS84 ellipsoid.
Accuracy is at the metre level, which is what a 7-parameter datum shift
allows; no grid correction is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# Bessel 1841
BESSEL_A = 6377397.155
BESSEL_INV_F = 299.1528128
# WGS84
WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563

# RD New projection constants
LAT_0 = math.radians(52.1561605555556)
LON_0 = math.radians(5.38763888888889)
K_0 = 0.9999079
FALSE_EASTING = 155000.0
FALSE_NORTHING = 463000.0

# Amersfoort -> WGS 84 (4), coordinate frame rotation convention.
HELMERT_SHIFT = np.array([565.4171, 50.3319, 465.5524])
HELMERT_ROT_ARCSEC = (0.398957388243134, -0.343987817378283, 1.87740163998045)
HELMERT_SCALE_PPM = 4.0725

RD_X_RANGE = (-7000.0, 300000.0)
RD_Y_RANGE = (289000.0, 629000.0)


@dataclass(frozen=True)
class RdPoint:
    x: float
    y: float


@dataclass(frozen=True)
class Wgs84Point:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise DomainError(f"invalid WGS84 coordinate ({self.lat}, {self.lon})")


def _ecc2(inv_f: float) -> float:
    f = 1.0 / inv_f
    return f * (2.0 - f)


_E2_BESSEL = _ecc2(BESSEL_INV_F)
_E_BESSEL = math.sqrt(_E2_BESSEL)
_E2_WGS84 = _ecc2(WGS84_INV_F)


def _helmert_matrix() -> np.ndarray:
    rx, ry, rz = (math.radians(r / 3600.0) for r in HELMERT_ROT_ARCSEC)
    rot = np.array([[1.0, rz, -ry], [-rz, 1.0, rx], [ry, -rx, 1.0]])
    return (1.0 + HELMERT_SCALE_PPM * 1e-6) * rot


_HELMERT = _helmert_matrix()
_HELMERT_INV = np.linalg.inv(_HELMERT)


class _ObliqueStereographic:
    """Oblique stereographic projection, conformal sphere variant (EPSG method 9809)."""

    def __init__(self, a, e2, lat0, lon0, k0, fe, fn):
        self.e = math.sqrt(e2)
        self.lon0 = lon0
        self.k0 = k0
        self.fe = fe
        self.fn = fn
        s0 = math.sin(lat0)
        rho0 = a * (1 - e2) / (1 - e2 * s0 * s0) ** 1.5
        nu0 = a / math.sqrt(1 - e2 * s0 * s0)
        self.R = math.sqrt(rho0 * nu0)
        self.n = math.sqrt(1 + e2 * math.cos(lat0) ** 4 / (1 - e2))
        self.e2 = e2
        w1 = self._w(lat0, 1.0)
        sin_chi00 = (w1 - 1) / (w1 + 1)
        self.c = (self.n + s0) * (1 - sin_chi00) / ((self.n - s0) * (1 + sin_chi00))
        w2 = self.c * w1
        self.chi0 = math.asin((w2 - 1) / (w2 + 1))

    def _w(self, lat, c):
        s = math.sin(lat)
        sa = (1 + s) / (1 - s)
        sb = (1 - self.e * s) / (1 + self.e * s)
        return c * (sa * sb**self.e) ** self.n

    def forward(self, lat, lon):
        big_lam = self.n * (lon - self.lon0)
        w = self._w(lat, self.c)
        chi = math.asin((w - 1) / (w + 1))
        b = 1 + math.sin(chi) * math.sin(self.chi0) + math.cos(chi) * math.cos(self.chi0) * math.cos(big_lam)
        two_rk = 2 * self.R * self.k0
        x = self.fe + two_rk * math.cos(chi) * math.sin(big_lam) / b
        y = self.fn + two_rk * (
            math.sin(chi) * math.cos(self.chi0) - math.cos(chi) * math.sin(self.chi0) * math.cos(big_lam)
        ) / b
        return x, y

    def inverse(self, x, y):
        two_rk = 2 * self.R * self.k0
        de, dn = x - self.fe, y - self.fn
        g = two_rk * math.tan(math.pi / 4 - self.chi0 / 2)
        h = 2 * two_rk * math.tan(self.chi0) + g
        i = math.atan2(de, h + dn)
        j = math.atan2(de, g - dn) - i
        chi = self.chi0 + 2 * math.atan((dn - de * math.tan(j / 2)) / two_rk)
        big_lam = j + 2 * i
        lon = big_lam / self.n + self.lon0
        psi = 0.5 * math.log((1 + math.sin(chi)) / (self.c * (1 - math.sin(chi)))) / self.n
        lat = 2 * math.atan(math.exp(psi)) - math.pi / 2
        for _ in range(50):
            s = math.sin(lat)
            psi_i = math.log(math.tan(lat / 2 + math.pi / 4) * ((1 - self.e * s) / (1 + self.e * s)) ** (self.e / 2))
            step = (psi_i - psi) * math.cos(lat) * (1 - self.e2 * s * s) / (1 - self.e2)
            lat -= step
            if abs(step) < 1e-15:
                break
        return lat, lon


_RD = _ObliqueStereographic(BESSEL_A, _E2_BESSEL, LAT_0, LON_0, K_0, FALSE_EASTING, FALSE_NORTHING)


def _geodetic_to_cartesian(lat, lon, h, a, e2):
    s = math.sin(lat)
    nu = a / math.sqrt(1 - e2 * s * s)
    return np.array([
        (nu + h) * math.cos(lat) * math.cos(lon),
        (nu + h) * math.cos(lat) * math.sin(lon),
        (nu * (1 - e2) + h) * s,
    ])


def _cartesian_to_geodetic(xyz, a, e2):
    x, y, z = xyz
    lon = math.atan2(y, x)
    p = math.hypot(x, y)
    lat = math.atan2(z, p * (1 - e2))
    h = 0.0
    for _ in range(50):
        s = math.sin(lat)
        nu = a / math.sqrt(1 - e2 * s * s)
        h = p / math.cos(lat) - nu
        new_lat = math.atan2(z, p * (1 - e2 * nu / (nu + h)))
        if abs(new_lat - lat) < 1e-15:
            lat = new_lat
            break
        lat = new_lat
    return lat, lon, h


def _check_rd_domain(x: float, y: float) -> None:
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DomainError(f"non-finite RD coordinate ({x}, {y})")
    if not (RD_X_RANGE[0] <= x <= RD_X_RANGE[1] and RD_Y_RANGE[0] <= y <= RD_Y_RANGE[1]):
        raise DomainError(f"RD coordinate ({x}, {y}) outside the RD New domain")


def reproject_rd_to_wgs84(p: RdPoint) -> Wgs84Point:
    _check_rd_domain(p.x, p.y)
    lat_b, lon_b = _RD.inverse(p.x, p.y)
    # Ellipsoidal height 0 on Bessel; the height is dropped after the shift.
    xyz = _geodetic_to_cartesian(lat_b, lon_b, 0.0, BESSEL_A, _E2_BESSEL)
    xyz_w = HELMERT_SHIFT + _HELMERT @ xyz
    lat, lon, _ = _cartesian_to_geodetic(xyz_w, WGS84_A, _E2_WGS84)
    return Wgs84Point(math.degrees(lat), math.degrees(lon))


def reproject_wgs84_to_rd(p: Wgs84Point) -> RdPoint:
    """Inverse of :func:`reproject_rd_to_wgs84`.

    The ellipsoidal height on the WGS84 side is unknown, so it is solved for
    such that the Bessel height is zero, which makes the pair exact inverses.
    """
    lat, lon = math.radians(p.lat), math.radians(p.lon)
    h = 0.0
    for _ in range(10):
        xyz_w = _geodetic_to_cartesian(lat, lon, h, WGS84_A, _E2_WGS84)
        xyz_b = _HELMERT_INV @ (xyz_w - HELMERT_SHIFT)
        lat_b, lon_b, h_b = _cartesian_to_geodetic(xyz_b, BESSEL_A, _E2_BESSEL)
        if abs(h_b) < 1e-6:
            break
        h -= h_b
    x, y = _RD.forward(lat_b, lon_b)
    return RdPoint(x, y)
