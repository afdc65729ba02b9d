"""Geographic primitives: validated coordinates, great-circle distance and
unit-sphere conversion.

Coordinates are (lon, lat) in degrees at every API boundary.  Array helpers
accept ``(..., 2)`` arrays laid out the same way.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import NonFiniteError, RangeError

EARTH_RADIUS_KM = 6371.0


class LocationDeg(NamedTuple):
    lon: float
    lat: float


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


def validate_location(lon, lat) -> LocationDeg:
    """Return a ``LocationDeg`` or raise; out-of-range values are never wrapped."""
    lon = float(lon)
    lat = float(lat)
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise NonFiniteError(f"non-finite coordinate (lon={lon}, lat={lat})")
    if not -180.0 <= lon <= 180.0:
        raise RangeError(f"longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise RangeError(f"latitude {lat} outside [-90, 90]")
    return LocationDeg(lon, lat)


def validate_lonlat_array(lonlat) -> np.ndarray:
    """Vectorised ``validate_location`` for an ``(n, 2)`` array."""
    arr = np.asarray(lonlat, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise RangeError(f"expected an (n, 2) lon/lat array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite coordinate in array")
    bad_lon = np.abs(arr[:, 0]) > 180.0
    bad_lat = np.abs(arr[:, 1]) > 90.0
    if bad_lon.any() or bad_lat.any():
        i = int(np.flatnonzero(bad_lon | bad_lat)[0])
        raise RangeError(f"coordinate out of range at row {i}: {tuple(arr[i])}")
    return arr


def _hav_term(lon1, lat1, lon2, lat2):
    lon1, lat1, lon2, lat2 = (np.radians(v) for v in (lon1, lat1, lon2, lat2))
    a = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return np.clip(a, 0.0, 1.0)


def central_angle(lon1, lat1, lon2, lat2):
    """Broadcasting central angle in radians between degree coordinates."""
    return 2.0 * np.arcsin(np.sqrt(_hav_term(lon1, lat1, lon2, lat2)))


def haversine_array(lon1, lat1, lon2, lat2):
    """Broadcasting haversine distance in km."""
    return EARTH_RADIUS_KM * central_angle(lon1, lat1, lon2, lat2)


def haversine_km(a: LocationDeg, b: LocationDeg) -> float:
    return float(haversine_array(a[0], a[1], b[0], b[1]))


def great_circle_angle_rad(a: LocationDeg, b: LocationDeg) -> float:
    return float(central_angle(a[0], a[1], b[0], b[1]))


def lonlat_to_xyz_array(lonlat) -> np.ndarray:
    """Map an ``(..., 2)`` array of degrees onto the unit sphere, ``(..., 3)``."""
    arr = np.asarray(lonlat, dtype=np.float64)
    lon = np.radians(arr[..., 0])
    lat = np.radians(arr[..., 1])
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def latlon_to_xyz(a: LocationDeg) -> Vec3:
    x, y, z = lonlat_to_xyz_array([a[0], a[1]])
    return Vec3(float(x), float(y), float(z))


def destination_point(lon, lat, bearing_rad, dist_km):
    """Point reached travelling ``dist_km`` from (lon, lat) along an initial bearing.

    Bearing is measured clockwise from north.  Broadcasts over array inputs and
    returns ``(lon, lat)`` arrays with longitude wrapped into [-180, 180].
    """
    lam1 = np.radians(lon)
    phi1 = np.radians(lat)
    delta = np.asarray(dist_km, dtype=np.float64) / EARTH_RADIUS_KM
    sin_phi2 = (np.sin(phi1) * np.cos(delta)
                + np.cos(phi1) * np.sin(delta) * np.cos(bearing_rad))
    phi2 = np.arcsin(np.clip(sin_phi2, -1.0, 1.0))
    lam2 = lam1 + np.arctan2(np.sin(bearing_rad) * np.sin(delta) * np.cos(phi1),
                             np.cos(delta) - np.sin(phi1) * sin_phi2)
    lon2 = (np.degrees(lam2) + 180.0) % 360.0 - 180.0
    return lon2, np.degrees(phi2)


def sample_uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the sphere as an ``(n, 2)`` lon/lat array."""
    lon = rng.uniform(-180.0, 180.0, size=n)
    lat = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, size=n)))
    return np.column_stack([lon, lat])
