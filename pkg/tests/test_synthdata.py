import hashlib
import json

import numpy as np
import pytest

from geossl.geo import EARTH_RADIUS_KM, GeoCoordinate
from geossl.synthdata import (SynthConfig, World, dataset_summary, generate, load_dataset, render_patch,
                              sample_locations)


def _digest(path):
    h = hashlib.sha256()
    for name in ("manifest.json", "patches.bin"):
        h.update((path / name).read_bytes())
    return h.hexdigest()


def test_sample_locations_deterministic_and_in_range():
    a, b = sample_locations(500, 3), sample_locations(500, 3)
    assert a.tobytes() == b.tobytes()
    for lon, lat in a:
        GeoCoordinate(lon, lat)


def test_sample_locations_uniform_in_sin_lat():
    c = sample_locations(10_000, 0)
    # sin(lat) ~ U(-1, 1): sd of the mean is 1/sqrt(3 * 1e4) ~ 0.0058
    assert abs(np.mean(np.sin(c[:, 1]))) < 0.02
    assert abs(np.mean(c[:, 0])) < 0.06


def test_noise_free_coincident_patches_identical():
    cfg = SynthConfig(noise=0.0, seed=5)
    loc = GeoCoordinate(0.4, -0.2)
    a, b = render_patch(loc, 1, cfg), render_patch(loc, 1, cfg)
    assert a.tobytes() == b.tobytes()
    assert a.shape[0] == cfg.channels


def test_patch_is_deterministic_with_noise():
    cfg = SynthConfig(seed=2)
    loc = GeoCoordinate(1.0, 0.5)
    assert render_patch(loc, 0, cfg).tobytes() == render_patch(loc, 0, cfg).tobytes()
    assert render_patch(loc, 0, cfg).tobytes() != render_patch(loc, 1, cfg).tobytes()


def _offset(coords, dist_km, rng):
    """Points at great-circle distance ``dist_km`` in random directions."""
    lon, lat = coords[:, 0], coords[:, 1]
    d = dist_km / EARTH_RADIUS_KM
    brg = rng.uniform(0, 2 * np.pi, len(coords))
    lat2 = np.arcsin(np.sin(lat) * np.cos(d) + np.cos(lat) * np.sin(d) * np.cos(brg))
    lon2 = lon + np.arctan2(np.sin(brg) * np.sin(d) * np.cos(lat), np.cos(d) - np.sin(lat) * np.sin(lat2))
    lon2 = (lon2 + np.pi) % (2 * np.pi) - np.pi
    return np.column_stack([lon2, lat2])


def _pair_corr(world, a, b):
    xa = world.render(a, 0).reshape(len(a), -1)
    xb = world.render(b, 0).reshape(len(b), -1)
    xa = xa - xa.mean(axis=1, keepdims=True)
    xb = xb - xb.mean(axis=1, keepdims=True)
    return np.sum(xa * xb, axis=1) / np.linalg.norm(xa, axis=1) / np.linalg.norm(xb, axis=1)


def test_correlation_decays_with_distance():
    cfg = SynthConfig()
    world = World.build(cfg)
    rng = np.random.default_rng(1)
    base = sample_locations(1000, 99)
    near = _pair_corr(world, base, _offset(base, cfg.length_scale_km / 10, rng))
    far = _pair_corr(world, base, _offset(base, min(10 * cfg.length_scale_km, 19000), rng))
    se = np.sqrt(near.var() / len(near) + far.var() / len(far))
    assert near.mean() - far.mean() > 3 * se


def test_within_region_similarity_exceeds_cross_region():
    cfg = SynthConfig()
    world = World.build(cfg)
    rng = np.random.default_rng(2)
    pts = sample_locations(4000, 17)
    reg = world.region_of(pts)
    i, j = rng.integers(0, len(pts), (2, 3000))
    corr = _pair_corr(world, pts[i], pts[j])
    same = corr[reg[i] == reg[j]]
    diff = corr[reg[i] != reg[j]]
    se = np.sqrt(same.var() / len(same) + diff.var() / len(diff))
    assert same.mean() - diff.mean() > 3 * se


def test_label_is_function_of_location():
    world = World.build(SynthConfig(seed=4))
    pts = sample_locations(200, 4)
    assert np.array_equal(world.label_of(pts), world.label_of(pts.copy()))
    assert set(world.region_class.tolist()) == set(range(5))


def test_generate_small_dataset(tmp_path):
    cfg = SynthConfig(n_locations=100, timestamps=1, height=8, width=8)
    manifest = generate(cfg, tmp_path / "d")
    assert manifest["counts"]["records"] == 100
    ds = load_dataset(tmp_path / "d")
    assert ds.patches.shape == (100, 1, 4, 8, 8)
    size = (tmp_path / "d" / "patches.bin").stat().st_size
    assert size == 100 * 4 * 8 * 8 * 4
    assert len(ds.train) + len(ds.test) == 100
    assert not set(ds.train) & set(ds.test)
    assert "100 locations" in dataset_summary(manifest)
    assert ds.patches.min() >= 0 and ds.patches.max() <= 255
    rec = ds.record(3, 0)
    assert rec.label == ds.labels[3]


def test_manifest_contents(tmp_path):
    generate(SynthConfig(n_locations=50, timestamps=2, height=4, width=4), tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["version"] == "GSD1"
    assert len(m["percentiles"]) == 4 and all(p > 0 for p in m["percentiles"])
    recs = m["records"]  # column-oriented, record-major order
    assert all(len(col) == 100 for col in recs.values())
    assert recs["location"][:3] == [0, 0, 1] and recs["timestamp"][:3] == [0, 1, 0]
    assert recs["lon"][0] == recs["lon"][1]


def test_stratified_split_per_class(tmp_path):
    generate(SynthConfig(n_locations=400, timestamps=1, height=4, width=4), tmp_path / "d")
    ds = load_dataset(tmp_path / "d")
    for c in range(ds.n_classes):
        n = np.sum(ds.labels == c)
        n_test = np.sum(ds.labels[ds.test] == c)
        assert abs(n_test - round(0.2 * n)) <= 1


def test_blocked_split_has_no_region_overlap(tmp_path):
    generate(SynthConfig(n_locations=300, timestamps=1, height=4, width=4, split="blocked"), tmp_path / "d")
    ds = load_dataset(tmp_path / "d")
    assert len(ds.test) > 0
    assert not set(ds.regions[ds.train]) & set(ds.regions[ds.test])


def test_regeneration_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_locations=120, timestamps=2, height=8, width=8, seed=7)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_existing_directory_needs_force(tmp_path):
    cfg = SynthConfig(n_locations=20, timestamps=1, height=4, width=4)
    generate(cfg, tmp_path / "d")
    with pytest.raises(FileExistsError):
        generate(cfg, tmp_path / "d")
    generate(cfg, tmp_path / "d", force=True)


def test_config_validation():
    for bad in (dict(n_locations=0), dict(n_classes=9), dict(noise=-1), dict(split="x"), dict(test_fraction=1.0)):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_default_config_size():
    cfg = SynthConfig()
    assert (cfg.n_locations, cfg.channels, cfg.height, cfg.width, cfg.n_classes, cfg.n_regions, cfg.timestamps) \
        == (4096, 4, 16, 16, 5, 8, 4)
