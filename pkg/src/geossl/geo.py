"""Great-circle geometry on a spherical Earth."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class GeoCoordinate:
    """A point on the sphere; both fields in radians."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise ValueError(f"non-finite coordinate ({self.lon}, {self.lat})")
        if not (-math.pi <= self.lon <= math.pi and -math.pi / 2 <= self.lat <= math.pi / 2):
            raise ValueError(f"coordinate out of range ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class GeoBatch:
    coords: np.ndarray  # (K, 2) lon, lat in radians
    dist: np.ndarray  # (K, K) km
    mask: np.ndarray  # (K, K) 0/1
    d_max: float

    @property
    def k(self) -> int:
        return self.dist.shape[0]


def _haversine_arrays(lon1, lat1, lon2, lat2, radius):
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    s_dlon = np.sin(dlon / 2.0) ** 2
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * s_dlon
    # 1 - h written as a sum of squares, so it keeps full precision near antipodes
    c = np.cos(dlat / 2.0) ** 2 * np.cos(dlon / 2.0) ** 2 + np.sin((lat1 + lat2) / 2.0) ** 2 * s_dlon
    return 2.0 * radius * np.arctan2(np.sqrt(h), np.sqrt(c))


def haversine(a: GeoCoordinate, b: GeoCoordinate, radius: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance in km.

    Symmetric bit-for-bit: the two endpoints are put in a canonical order
    before evaluating.
    """
    if (b.lon, b.lat) < (a.lon, a.lat):
        a, b = b, a
    return float(_haversine_arrays(a.lon, a.lat, b.lon, b.lat, radius))


def pairwise_distances(coords: np.ndarray, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """(K, K) haversine matrix for an array of (lon, lat) rows, in km."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates")
    lon, lat = coords[:, 0], coords[:, 1]
    d = _haversine_arrays(lon[:, None], lat[:, None], lon[None, :], lat[None, :], radius)
    # exact symmetry and zero diagonal regardless of rounding order
    d = np.triu(d, 1)
    return d + d.T


def distances_from(coords: np.ndarray, lon: float, lat: float,
                   radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Distance in km from one point to every (lon, lat) row."""
    coords = np.asarray(coords, dtype=np.float64)
    return _haversine_arrays(lon, lat, coords[:, 0], coords[:, 1], radius)


def pairwise_geo(coords, d_max: float, radius: float = EARTH_RADIUS_KM) -> GeoBatch:
    """Distances and the inclusive proximity mask ``dist <= d_max``."""
    if isinstance(coords, (list, tuple)) and coords and isinstance(coords[0], GeoCoordinate):
        coords = np.array([(c.lon, c.lat) for c in coords])
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise ValueError("pairwise_geo needs at least two coordinates")
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    dist = pairwise_distances(coords, radius)
    mask = (dist <= d_max).astype(np.float64)
    return GeoBatch(coords=coords, dist=dist, mask=mask, d_max=float(d_max))


def ascending_rank(values: np.ndarray) -> np.ndarray:
    """1-based ranks along the last axis, ties broken by ascending index."""
    values = np.asarray(values)
    order = np.argsort(values, axis=-1, kind="stable")
    return np.argsort(order, axis=-1, kind="stable") + 1


def neighbor_distances(batch: GeoBatch) -> np.ndarray:
    """(K, K-1) distances of each anchor to its neighbours in index order."""
    k = batch.k
    return batch.dist[~np.eye(k, dtype=bool)].reshape(k, k - 1)


def neighbor_mask(batch: GeoBatch) -> np.ndarray:
    k = batch.k
    return batch.mask[~np.eye(k, dtype=bool)].reshape(k, k - 1)


def geo_rank(anchor: int, batch: GeoBatch) -> np.ndarray:
    """Rank (closest = 1) of each of the anchor's K-1 neighbours."""
    if not 0 <= anchor < batch.k:
        raise IndexError(f"anchor {anchor} out of range for K={batch.k}")
    return ascending_rank(neighbor_distances(batch)[anchor])


def geo_ranks(batch: GeoBatch) -> np.ndarray:
    """All anchors at once, shape (K, K-1)."""
    return ascending_rank(neighbor_distances(batch))
