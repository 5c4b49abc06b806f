"""Synthetic geo-tagged multispectral datasets (GSD1 on-disk format).

Locations are uniform on the sphere. Regions are spherical Voronoi cells of
random seed points and each region maps to a class. A patch is the region's
prototype texture plus a smooth field of location, a seasonal offset per
timestamp, and pixel noise. Nearby locations therefore look alike, which is
what a geographic regularizer can exploit.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .augment import percentile_normalize
from .geo import EARTH_RADIUS_KM, GeoCoordinate

FORMAT_VERSION = "GSD1"
MANIFEST = "manifest.json"
PATCHES = "patches.bin"
# per-channel raw reflectance scale: maps the [0, 255] render range to uint16-like values
_RAW_SCALE = np.array([2400.0, 2800.0, 3200.0, 3600.0, 3000.0, 2600.0, 3400.0, 2200.0])


@dataclass
class SynthConfig:
    n_locations: int = 4096
    channels: int = 4
    height: int = 16
    width: int = 16
    n_classes: int = 5
    n_regions: int = 8
    timestamps: int = 4
    noise: float = 12.0
    length_scale_km: float = 2500.0
    seed: int = 0
    n_harmonics: int = 24
    prototype_amp: float = 10.0
    field_amp: float = 30.0
    season_amp: float = 10.0
    test_fraction: float = 0.2
    split: str = "random"  # random | blocked

    def __post_init__(self):
        for name in ("n_locations", "channels", "height", "width", "n_classes", "n_regions",
                     "timestamps", "n_harmonics"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes > self.n_regions:
            raise ValueError("n_classes must not exceed n_regions")
        if self.noise < 0 or self.length_scale_km <= 0:
            raise ValueError("noise must be >= 0 and length_scale_km > 0")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.split not in ("random", "blocked"):
            raise ValueError("split must be 'random' or 'blocked'")


@dataclass
class SampleRecord:
    patch: np.ndarray
    location: GeoCoordinate
    timestamp: int
    label: int


def sample_locations(n: int, seed: int) -> np.ndarray:
    """(n, 2) lon/lat in radians, uniform on the sphere."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 0x10C])
    lon = rng.uniform(-np.pi, np.pi, n)
    lat = np.arcsin(rng.uniform(-1.0, 1.0, n))
    return np.column_stack([lon, lat])


def to_unit_vectors(coords: np.ndarray) -> np.ndarray:
    lon, lat = coords[..., 0], coords[..., 1]
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


@dataclass
class World:
    """Everything about the generator that depends only on the seed."""

    cfg: SynthConfig
    region_seeds: np.ndarray  # (R, 3) unit vectors
    region_class: np.ndarray  # (R,)
    prototypes: np.ndarray  # (R, C, H, W), unit std
    harmonic_dirs: np.ndarray  # (nh, 3)
    harmonic_freq: np.ndarray  # (nh,)
    harmonic_phase: np.ndarray  # (nh,)
    harmonic_maps: np.ndarray  # (nh, C, H, W)
    season: np.ndarray  # (T, C)
    raw_scale: np.ndarray = field(default=None)

    @classmethod
    def build(cls, cfg: SynthConfig) -> "World":
        rng = np.random.default_rng([cfg.seed, 0x3D])
        c, h, w = cfg.channels, cfg.height, cfg.width
        seeds = to_unit_vectors(sample_locations(cfg.n_regions, cfg.seed + 7919))
        region_class = np.arange(cfg.n_regions) % cfg.n_classes
        protos = _smooth_textures(rng, cfg.n_regions, c, h, w, sigma=1.5)
        # channel-level signature on top of the texture
        protos += rng.normal(0, 1.0, (cfg.n_regions, c, 1, 1))
        protos /= protos.std(axis=(1, 2, 3), keepdims=True)
        dirs = rng.normal(size=(cfg.n_harmonics, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        freq = EARTH_RADIUS_KM / cfg.length_scale_km * rng.uniform(0.5, 1.5, cfg.n_harmonics)
        phase = rng.uniform(0, 2 * np.pi, cfg.n_harmonics)
        maps = _smooth_textures(rng, cfg.n_harmonics, c, h, w, sigma=2.0)
        maps += rng.normal(0, 1.0, (cfg.n_harmonics, c, 1, 1))
        maps /= maps.std(axis=(1, 2, 3), keepdims=True)
        tt = np.arange(cfg.timestamps)[:, None]
        chan_phase = rng.uniform(0, 2 * np.pi, (1, c))
        season = np.sin(2 * np.pi * tt / max(cfg.timestamps, 1) + chan_phase)
        raw_scale = np.resize(_RAW_SCALE, c)
        return cls(cfg, seeds, region_class, protos, dirs, freq, phase, maps, season, raw_scale)

    def region_of(self, coords: np.ndarray) -> np.ndarray:
        """Voronoi cell (largest dot product with a seed) of each location."""
        return np.argmax(to_unit_vectors(np.atleast_2d(coords)) @ self.region_seeds.T, axis=1)

    def label_of(self, coords: np.ndarray) -> np.ndarray:
        return self.region_class[self.region_of(coords)]

    def field_coefficients(self, coords: np.ndarray) -> np.ndarray:
        u = to_unit_vectors(np.atleast_2d(coords))
        return np.cos((u @ self.harmonic_dirs.T) * self.harmonic_freq + self.harmonic_phase)

    def render(self, coords: np.ndarray, t: np.ndarray, noise_keys: np.ndarray | None = None) -> np.ndarray:
        """Patches in display range [0, 255] for paired (location, timestamp) arrays."""
        cfg = self.cfg
        coords = np.atleast_2d(coords)
        t = np.broadcast_to(np.asarray(t), (len(coords),))
        reg = self.region_of(coords)
        coef = self.field_coefficients(coords) / np.sqrt(cfg.n_harmonics)
        shape = (cfg.channels, cfg.height, cfg.width)
        fld = (coef @ self.harmonic_maps.reshape(cfg.n_harmonics, -1)).reshape((-1,) + shape)
        x = (127.5 + cfg.prototype_amp * self.prototypes[reg] + cfg.field_amp * fld
             + cfg.season_amp * self.season[t][:, :, None, None])
        if cfg.noise > 0:
            for i in range(len(coords)):
                x[i] += cfg.noise * _noise_rng(cfg.seed, coords[i], int(t[i])).standard_normal(shape)
        return np.clip(x, 0.0, 255.0)


def _noise_rng(seed: int, coord, t: int) -> np.random.Generator:
    bits = np.asarray(coord, dtype=np.float64).view(np.uint64)
    return np.random.default_rng([seed, 0x5EED, int(bits[0]), int(bits[1]), t])


def _smooth_textures(rng, n, c, h, w, sigma):
    raw = rng.normal(size=(n, c, h, w))
    out = ndimage.gaussian_filter(raw, sigma=(0, 0, sigma, sigma), mode="wrap")
    return out / out.std(axis=(1, 2, 3), keepdims=True)


def render_patch(loc: GeoCoordinate, t: int, cfg: SynthConfig, seed: int | None = None) -> np.ndarray:
    """One patch in display range; ``seed`` overrides ``cfg.seed``."""
    if seed is not None and seed != cfg.seed:
        cfg = SynthConfig(**{**asdict(cfg), "seed": seed})
    world = World.build(cfg)
    return world.render(np.array([[loc.lon, loc.lat]]), np.array([t]))[0]


def _stratified_split(labels: np.ndarray, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    test = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        test.extend(idx[:int(round(frac * len(idx)))].tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


def _blocked_split(regions: np.ndarray, region_class: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the last region of every class that owns more than one region."""
    held = []
    for c in np.unique(region_class):
        owned = np.flatnonzero(region_class == c)
        if len(owned) > 1:
            held.append(int(owned[-1]))
    is_test = np.isin(regions, held)
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def generate(cfg: SynthConfig, out_dir, force: bool = False) -> dict:
    """Write a GSD1 dataset and return its manifest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    out.mkdir(parents=True, exist_ok=True)
    world = World.build(cfg)
    coords = sample_locations(cfg.n_locations, cfg.seed)
    regions = world.region_of(coords)
    labels = world.region_class[regions]
    n, T = cfg.n_locations, cfg.timestamps
    rec_loc = np.repeat(np.arange(n), T)
    rec_t = np.tile(np.arange(T), n)
    shape = (cfg.channels, cfg.height, cfg.width)
    raw = np.empty((n * T,) + shape, dtype="<f4")
    chunk = 1024
    for s in range(0, n * T, chunk):
        sl = slice(s, min(s + chunk, n * T))
        disp = world.render(coords[rec_loc[sl]], rec_t[sl])
        raw[sl] = (disp / 255.0 * world.raw_scale[:, None, None]).astype("<f4")
    percentiles = np.percentile(raw.astype(np.float64), 99, axis=(0, 2, 3))

    if cfg.split == "random":
        train, test = _stratified_split(labels, cfg.test_fraction, np.random.default_rng([cfg.seed, 0x5917]))
    else:
        train, test = _blocked_split(regions, world.region_class)

    manifest = {
        "version": FORMAT_VERSION,
        "counts": {"locations": n, "timestamps": T, "records": n * T,
                   "train": int(len(train)), "test": int(len(test))},
        "shape": list(shape),
        "class_names": [f"class_{c}" for c in range(cfg.n_classes)],
        "percentiles": [float(p) for p in percentiles],
        "split": {"kind": cfg.split, "train": train.tolist(), "test": test.tolist()},
        "records": {
            "location": rec_loc.tolist(),
            "lon": coords[rec_loc, 0].tolist(),
            "lat": coords[rec_loc, 1].tolist(),
            "timestamp": rec_t.tolist(),
            "label": labels[rec_loc].tolist(),
            "region": regions[rec_loc].tolist(),
        },
        "config": asdict(cfg),
    }
    with open(out / PATCHES, "wb") as fh:
        fh.write(raw.tobytes())
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class Dataset:
    """In-memory view of a GSD1 directory, patches percentile-normalized to [0, 255]."""

    path: Path
    manifest: dict
    patches: np.ndarray  # (N, T, C, H, W) float32
    coords: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,)
    regions: np.ndarray  # (N,)
    train: np.ndarray
    test: np.ndarray

    @property
    def n_locations(self) -> int:
        return self.patches.shape[0]

    @property
    def timestamps(self) -> int:
        return self.patches.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.manifest["class_names"])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[2:])

    def record(self, loc: int, t: int) -> SampleRecord:
        return SampleRecord(self.patches[loc, t].astype(np.float64),
                            GeoCoordinate(*self.coords[loc]), t, int(self.labels[loc]))


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath, ppath = path / MANIFEST, path / PATCHES
    if not mpath.exists() or not ppath.exists():
        raise FileNotFoundError(f"{path} is not a GSD1 dataset")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    counts = manifest["counts"]
    n, T = counts["locations"], counts["timestamps"]
    shape = tuple(manifest["shape"])
    raw = np.fromfile(ppath, dtype="<f4")
    if raw.size != n * T * int(np.prod(shape)):
        raise ValueError(f"{ppath} holds {raw.size} floats, manifest implies {n * T * int(np.prod(shape))}")
    raw = raw.reshape((n * T,) + shape)
    norm = percentile_normalize(raw, manifest["percentiles"]).astype(np.float32)
    recs = manifest["records"]
    loc = np.asarray(recs["location"])
    tt = np.asarray(recs["timestamp"])
    patches = np.empty((n, T) + shape, dtype=np.float32)
    patches[loc, tt] = norm
    first = np.flatnonzero(tt == 0) if T else np.arange(n)
    first = first[np.argsort(loc[first])]
    coords = np.column_stack([np.asarray(recs["lon"])[first], np.asarray(recs["lat"])[first]])
    labels = np.asarray(recs["label"])[first]
    regions = np.asarray(recs.get("region", [0] * len(loc)))[first]
    return Dataset(path, manifest, patches, coords, labels, regions,
                   np.asarray(manifest["split"]["train"], dtype=np.int64),
                   np.asarray(manifest["split"]["test"], dtype=np.int64))


def dataset_summary(manifest: dict) -> str:
    c = manifest["counts"]
    return (f"GSD1 dataset: {c['locations']} locations x {c['timestamps']} timestamps "
            f"= {c['records']} records, shape {tuple(manifest['shape'])}, "
            f"{len(manifest['class_names'])} classes, split {manifest['split']['kind']} "
            f"({c['train']} train / {c['test']} test)")
