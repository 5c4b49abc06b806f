import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geossl import diffcore as dc
from geossl import harness
from geossl.harness import (CSV_COLUMNS, NonFiniteLossError, RunConfig, grid_variant, knn_evaluate,
                            knn_predict, linear_probe, macro_accuracy, pretrain, probe_features,
                            run_ablation, spearman_from_arrays, write_csv)
from geossl.losses import LossConfig
from geossl.model import Encoder

FAST = dict(epochs=2, batch_size=32, hidden=32, dim=16, proj_dim=8, queue_size=64, probe_epochs=5)


def fast_cfg(**kw):
    loss = kw.pop("loss", LossConfig(d_max=18000.0, epsilon=0.01))
    return RunConfig(dataset="unused", loss=loss, **{**FAST, **kw})


# ------------------------------------------------------------------ k-NN

def clusters(rng, n_per, centers, spread=0.05):
    x = np.concatenate([c + spread * rng.normal(size=(n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return x, y


def test_knn_separated_clusters_is_perfect():
    rng = np.random.default_rng(0)
    centers = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    xtr, ytr = clusters(rng, 50, centers)
    xte, yte = clusters(rng, 20, centers)
    assert macro_accuracy(yte, knn_predict(xtr, ytr, xte)) == 1.0


def test_knn_permuted_labels_is_chance():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2000, 8))
        y = rng.integers(0, 5, 2000)
        y = rng.permutation(y)
        accs.append(macro_accuracy(y[1000:], knn_predict(x[:1000], y[:1000], x[1000:], n_classes=5)))
    assert abs(np.mean(accs) - 0.2) <= 0.02


def test_knn_k1_duplicates():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 4))
    y = rng.integers(0, 3, 30)
    assert macro_accuracy(y, knn_predict(x, y, x.copy(), k=1)) == 1.0


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn_predict(np.ones((3, 2)), [0, 1, 0], np.ones((1, 2)), k=4)


@given(st.integers(0, 2**31))
def test_knn_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    xtr, xte = rng.normal(size=(60, 5)), rng.normal(size=(15, 5))
    ytr = rng.integers(0, 3, 60)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a = knn_predict(xtr, ytr, xte)
    b = knn_predict(xtr @ q, ytr, xte @ q)
    assert np.array_equal(a, b)


# ------------------------------------------------------------------ linear probe

def test_linear_probe_one_hot_features():
    y = np.repeat(np.arange(4), 25)
    x = np.eye(4)[y]
    assert probe_features(x, y, x, y, 4, epochs=20) == pytest.approx(1.0)


def test_linear_probe_zero_epochs_is_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 20)
    x = rng.normal(size=(100, 6))
    # untrained head: every logit is 0 and argmax picks class 0
    assert probe_features(x, y, x, y, 5, epochs=0) == pytest.approx(0.2)


# ------------------------------------------------------------------ spearman

def _gram_embedding(sim):
    """Unit-norm rows whose pairwise dot products equal ``sim`` off the diagonal."""
    g = np.array(sim, dtype=float)
    np.fill_diagonal(g, 1.0)
    w, v = np.linalg.eigh(g)
    assert w.min() > 0
    return v * np.sqrt(w)


def _line(n):
    lat = np.sort(np.random.default_rng(n).uniform(-0.6, 0.6, n))
    dist = np.abs(lat[:, None] - lat[None, :])
    return np.column_stack([np.zeros(n), lat]), dist


def test_spearman_monotone_construction():
    coords, dist = _line(30)
    # similarity falls with distance; row sums < 1 keep the Gram matrix positive definite
    emb = _gram_embedding(0.02 * (dist.max() - dist) / dist.max())
    assert spearman_from_arrays(emb, coords, d_max=1e5) == pytest.approx(1.0)


def test_spearman_reversed_construction():
    coords, dist = _line(30)
    emb = _gram_embedding(0.02 * dist / dist.max())
    assert spearman_from_arrays(emb, coords, d_max=1e5) == pytest.approx(-1.0)


def test_spearman_random_embeddings_near_zero():
    rng = np.random.default_rng(0)
    from oracles import random_coords
    coords = random_coords(rng, 1000)
    emb = rng.normal(size=(1000, 8))
    assert abs(spearman_from_arrays(emb, coords, d_max=5000.0)) < 0.05


def test_spearman_undefined_is_nan():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert math.isnan(spearman_from_arrays(np.eye(3), coords, d_max=1.0))
    with pytest.raises(ValueError):
        spearman_from_arrays(np.eye(2), coords[:2], d_max=1.0)


# ------------------------------------------------------------------ training

def test_pretrain_is_deterministic(tiny_dataset):
    cfg = fast_cfg(seed=3)
    a, ra = pretrain(cfg, tiny_dataset, evaluate=False)
    b, rb = pretrain(cfg, tiny_dataset, evaluate=False)
    assert a.to_bytes() == b.to_bytes()
    assert [e.loss_total for e in ra.epochs] == [e.loss_total for e in rb.epochs]


def test_alpha_one_rank_run_equals_baseline(tiny_dataset):
    base = fast_cfg(loss=LossConfig(alpha=1.0, geo_kind="none", d_max=18000.0))
    rank = fast_cfg(loss=LossConfig(alpha=1.0, geo_kind="rank", d_max=18000.0))
    a, ra = pretrain(base, tiny_dataset, evaluate=False)
    b, rb = pretrain(rank, tiny_dataset, evaluate=False)
    assert a.to_bytes() == b.to_bytes()
    assert [e.loss_ssl for e in ra.epochs] == [e.loss_ssl for e in rb.epochs]
    assert [e.loss_total for e in ra.epochs] == [e.loss_total for e in rb.epochs]


def test_report_rows_and_metrics(tiny_dataset):
    _, rep = pretrain(fast_cfg(), tiny_dataset)
    rows = rep.rows()
    assert len(rows) == rep.config.epochs + 1
    assert rows[-1]["epoch"] == "final"
    for v in (rep.knn_acc_macro, rep.linear_acc_macro, rep.spearman_geo, rep.wallclock_s):
        assert math.isfinite(v)
    text = write_csv(rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == CSV_COLUMNS
    assert len(parsed) == len(rows) + 1


def test_consistency_and_temporal_runs(tiny_dataset):
    cfg = fast_cfg(loss=LossConfig(ssl_kind="consistency", geo_kind="basic", d_max=18000.0),
                   temporal_views="on", epochs=1)
    _, rep = pretrain(cfg, tiny_dataset, evaluate=False)
    assert math.isfinite(rep.epochs[0].loss_total)


def test_nonfinite_loss_aborts(tiny_dataset, monkeypatch):
    def broken(batch, gb, cfg):
        bad = dc.constant(np.nan)
        return bad, bad, None

    monkeypatch.setattr(harness, "total_loss", broken)
    with pytest.raises(NonFiniteLossError, match="epoch 0"):
        pretrain(fast_cfg(), tiny_dataset, evaluate=False)


def test_config_errors(tiny_dataset):
    with pytest.raises(ValueError):
        RunConfig(batch_size=2)
    with pytest.raises(ValueError):
        RunConfig(temporal_views="maybe")
    with pytest.raises(ValueError):
        pretrain(fast_cfg(subset_size=10_000), tiny_dataset)
    with pytest.raises(ValueError):
        knn_evaluate(Encoder.init(harness.encoder_config(fast_cfg(), tiny_dataset), 0), tiny_dataset, k=10_000)


def test_temporal_off_flattens_every_image(tiny_dataset):
    cfg = grid_variant("temporal", "off", fast_cfg(), tiny_dataset)
    assert cfg.flatten_timestamps
    loc, t1, t2 = harness._items_for_epoch(cfg, tiny_dataset, tiny_dataset.train, np.random.default_rng(0))
    pairs = set(zip(loc.tolist(), t1.tolist()))
    assert len(pairs) == len(loc) == len(tiny_dataset.train) * tiny_dataset.timestamps
    assert np.array_equal(t1, t2)
    on = grid_variant("temporal", "on", fast_cfg(), tiny_dataset)
    loc, t1, t2 = harness._items_for_epoch(on, tiny_dataset, tiny_dataset.train, np.random.default_rng(0))
    assert np.all(t1 != t2)


def test_augmentation_axis_adds_one_spec_at_p02(tiny_dataset):
    cfg = grid_variant("augmentation", "cutout@2", fast_cfg(), tiny_dataset)
    pipe = harness.build_pipeline(cfg, 8)
    assert [s.technique for s in pipe.specs] == ["rrc", "flip", "rr90", "cutout"]
    assert pipe.specs[-1].p == 0.2 and pipe.specs[-1].params["max_edge"] == pytest.approx(0.4)
    assert harness.build_pipeline(grid_variant("augmentation", "baseline", fast_cfg()), 8).specs[-1].technique == "rr90"


def test_cardinality_ablation_row_arithmetic(tiny_dataset):
    cfg = fast_cfg(epochs=1, eval_linear=False, eval_spearman=False)
    rows = run_ablation("cardinality", [0.125, 0.25, 0.5, 1.0], cfg, seeds=range(5), ds=tiny_dataset)
    data = [r for r in rows if r["seed"] != "mean±std"]
    summary = [r for r in rows if r["seed"] == "mean±std"]
    assert len(data) == 20 and len(summary) == 4
    for s in summary:
        group = [float(r["knn_acc_macro"]) for r in data if r["grid_point"] == s["grid_point"]]
        mean, std = (float(v) for v in s["knn_acc_macro"].split("±"))
        assert mean == pytest.approx(np.mean(group), rel=1e-5)
        assert std == pytest.approx(np.std(group), rel=1e-5, abs=1e-9)


def test_ablation_errors(tiny_dataset):
    with pytest.raises(ValueError):
        run_ablation("cardinality", [], fast_cfg(), ds=tiny_dataset)
    with pytest.raises(ValueError):
        run_ablation("colour", [1], fast_cfg(), ds=tiny_dataset)
    with pytest.raises(ValueError):
        grid_variant("cardinality", 1.5, fast_cfg(), tiny_dataset)
