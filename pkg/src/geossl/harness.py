"""Pre-training loop, evaluation protocols and ablation drivers."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .augment import AugPipeline, AugSpec, apply_batch, base_params, geometric_pipeline, load_pipeline
from .geo import distances_from, pairwise_geo
from .losses import EmbeddingBatch, LossConfig, total_loss
from .model import SGD, Encoder, EncoderConfig, MemoryQueue, ema_update, momentum_at
from .synthdata import Dataset, load_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "run_id", "axis", "grid_point", "seed", "ssl_kind", "geo_kind", "alpha", "d_max", "epoch",
    "loss_ssl", "loss_reg", "loss_total", "knn_acc_macro", "linear_acc_macro", "spearman_geo",
    "wallclock_s",
]
AXES = ("augmentation", "cardinality", "temporal", "patch_size", "alpha_dmax")


@dataclass
class RunConfig:
    dataset: str = "data/synth"
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 64
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    grad_clip: float = 5.0  # global gradient-norm cap; 0 disables
    queue_size: int = 1024
    temporal_views: str = "off"  # on: two timestamps of one location are the positive pair
    flatten_timestamps: bool = False  # off-mode only: every (location, timestamp) is its own image
    subset_size: int = 0  # 0 = all training locations
    crop_size: int = 0  # centre crop before augmentation; 0 = full patch
    augmentation: str = "geometric"  # geometric | none | path to a pipeline TOML
    extra_aug: str = ""  # "technique@beta" appended at p=0.2
    hidden: int = 256
    dim: int = 64
    proj_dim: int = 32
    ema_total_steps: int = 0  # 0 = total optimizer steps of the run
    knn_k: int = 10
    knn_sharpening: float = 0.9
    probe_epochs: int = 30
    eval_linear: bool = True
    eval_spearman: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.loss.geo_kind == "rank" and self.batch_size < 3:
            raise ValueError("rank regularization needs batch_size >= 3")
        if self.temporal_views not in ("on", "off"):
            raise ValueError("temporal_views must be 'on' or 'off'")
        if self.epochs < 0 or self.lr <= 0 or self.queue_size < 0 or self.subset_size < 0:
            raise ValueError("epochs, queue_size and subset_size must be >= 0 and lr > 0")
        if self.knn_k < 1 or not 0 <= self.knn_sharpening < 1:
            raise ValueError("knn_k must be >= 1 and knn_sharpening in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:10]


@dataclass
class EpochStats:
    epoch: int
    loss_ssl: float
    loss_reg: float | None
    loss_total: float


@dataclass
class RunReport:
    config: RunConfig
    epochs: list[EpochStats] = field(default_factory=list)
    knn_acc_macro: float = math.nan
    linear_acc_macro: float = math.nan
    spearman_geo: float = math.nan
    wallclock_s: float = 0.0
    axis: str = "none"
    grid_point: str = ""

    @property
    def run_id(self) -> str:
        return f"{self.config.digest()}-s{self.config.seed}"

    def _base(self) -> dict:
        lc = self.config.loss
        return {"run_id": self.run_id, "axis": self.axis, "grid_point": self.grid_point,
                "seed": self.config.seed, "ssl_kind": lc.ssl_kind, "geo_kind": lc.geo_kind,
                "alpha": lc.alpha, "d_max": lc.d_max}

    def epoch_rows(self) -> list[dict]:
        rows = []
        for e in self.epochs:
            rows.append({**self._base(), "epoch": e.epoch, "loss_ssl": e.loss_ssl,
                         "loss_reg": "" if e.loss_reg is None else e.loss_reg,
                         "loss_total": e.loss_total, "knn_acc_macro": "", "linear_acc_macro": "",
                         "spearman_geo": "", "wallclock_s": ""})
        return rows

    def summary_row(self) -> dict:
        last = self.epochs[-1] if self.epochs else None
        return {**self._base(), "epoch": "final",
                "loss_ssl": "" if last is None else last.loss_ssl,
                "loss_reg": "" if last is None or last.loss_reg is None else last.loss_reg,
                "loss_total": "" if last is None else last.loss_total,
                "knn_acc_macro": self.knn_acc_macro, "linear_acc_macro": self.linear_acc_macro,
                "spearman_geo": self.spearman_geo, "wallclock_s": round(self.wallclock_s, 3)}

    def rows(self) -> list[dict]:
        return self.epoch_rows() + [self.summary_row()]


class NonFiniteLossError(RuntimeError):
    pass


# ------------------------------------------------------------------ data

def _center_crop(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if not size or size >= min(h, w):
        return x
    top, left = (h - size) // 2, (w - size) // 2
    return x[..., top:top + size, left:left + size]


def build_pipeline(cfg: RunConfig, out_size: int) -> AugPipeline:
    if cfg.augmentation == "geometric":
        pipe = geometric_pipeline(out_size)
    elif cfg.augmentation == "none":
        pipe = AugPipeline([], out_size)
    else:
        pipe = load_pipeline(cfg.augmentation)
        pipe.output_size = out_size
    if cfg.extra_aug:
        tech, _, beta = cfg.extra_aug.partition("@")
        pipe = AugPipeline(pipe.specs + [AugSpec(tech, 0.2, base_params(tech, int(beta or 1)))],
                           pipe.output_size)
    return pipe


def to_input(x: np.ndarray) -> np.ndarray:
    """Map display-range patches to roughly unit-scale encoder inputs."""
    return (np.asarray(x, dtype=np.float64).reshape(len(x), -1) - 127.5) / 64.0


def encoder_config(cfg: RunConfig, ds: Dataset) -> EncoderConfig:
    c, h, w = ds.shape
    return EncoderConfig(in_dim=c * h * w, hidden=cfg.hidden, dim=cfg.dim, proj_dim=cfg.proj_dim)


def _items_for_epoch(cfg: RunConfig, ds: Dataset, locs: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(location, timestamp view 1, timestamp view 2) per item, shuffled."""
    T = ds.timestamps
    if cfg.temporal_views == "on":
        loc = locs
        t1 = rng.integers(T, size=len(loc))
        if T > 1:
            t2 = (t1 + rng.integers(1, T, size=len(loc))) % T
        else:
            t2 = t1.copy()
    elif cfg.flatten_timestamps:
        loc = np.repeat(locs, T)
        t1 = np.tile(np.arange(T), len(locs))
        t2 = t1
    else:
        loc = locs
        t1 = rng.integers(T, size=len(loc))
        t2 = t1
    order = rng.permutation(len(loc))
    return loc[order], t1[order], t2[order]


def _train_locations(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    locs = ds.train
    if cfg.subset_size:
        if cfg.subset_size > len(locs):
            raise ValueError(f"subset_size {cfg.subset_size} exceeds {len(locs)} training locations")
        rng = np.random.default_rng([cfg.seed, 0xC4D])
        locs = np.sort(rng.choice(locs, size=cfg.subset_size, replace=False))
    return locs


# ------------------------------------------------------------------ training

def pretrain(cfg: RunConfig, ds: Dataset | None = None, evaluate: bool = True,
             progress=None) -> tuple[Encoder, RunReport]:
    """Self-supervised pre-training followed (optionally) by evaluation."""
    t0 = time.perf_counter()
    ds = ds if ds is not None else load_dataset(cfg.dataset)
    lc = cfg.loss
    ecfg = encoder_config(cfg, ds)
    online = Encoder.init(ecfg, seed=cfg.seed)
    target = online.copy()
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    queue = MemoryQueue(cfg.queue_size, ecfg.proj_dim) if (cfg.queue_size and lc.ssl_kind == "infonce") else None
    locs = _train_locations(cfg, ds)
    if len(locs) < cfg.batch_size:
        raise ValueError(f"only {len(locs)} training locations for batch size {cfg.batch_size}")
    out_size = ds.shape[1]
    pipe = build_pipeline(cfg, out_size)
    rng = np.random.default_rng([cfg.seed, 0x7A1])

    items_per_epoch = len(locs) * (ds.timestamps if (cfg.flatten_timestamps and cfg.temporal_views == "off") else 1)
    steps_per_epoch = items_per_epoch // cfg.batch_size
    total_steps = max(1, steps_per_epoch * cfg.epochs)
    ema_total = cfg.ema_total_steps or total_steps
    report = RunReport(cfg)
    step = 0
    for epoch in range(cfg.epochs):
        loc, t1, t2 = _items_for_epoch(cfg, ds, locs, rng)
        sums = np.zeros(3)
        reg_seen = False
        for b in range(steps_per_epoch):
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            bl = loc[sl]
            v1 = _center_crop(ds.patches[bl, t1[sl]], cfg.crop_size)
            v2 = _center_crop(ds.patches[bl, t2[sl]], cfg.crop_size)
            x1 = to_input(apply_batch(pipe, v1, cfg.seed, stream=2 * step))
            x2 = to_input(apply_batch(pipe, v2, cfg.seed, stream=2 * step + 1))

            nodes = online.leaves()
            z = online.encode(x1, nodes)
            zp = target.encode(x2)
            qv = queue.contents() if queue is not None and len(queue) else None
            batch = EmbeddingBatch(z, zp, qv)
            gb = pairwise_geo(ds.coords[bl], lc.d_max, lc.earth_radius_km) if lc.geo_kind != "none" else None
            total, l_ssl, l_reg = total_loss(batch, gb, lc)
            if not math.isfinite(total.item()):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {b}: "
                                         f"ssl={l_ssl.item()} reg={None if l_reg is None else l_reg.item()}")
            grads = dc.backward(total)
            opt.step(online.params, {k: grads[n] for k, n in nodes.items() if n in grads})
            ema_update(target, online, momentum_at(min(step, ema_total), ema_total))
            if queue is not None:
                queue.push(zp.value)
            sums += (l_ssl.item(), 0.0 if l_reg is None else l_reg.item(), total.item())
            reg_seen = reg_seen or l_reg is not None
            step += 1
        n = max(steps_per_epoch, 1)
        stats = EpochStats(epoch, sums[0] / n, sums[1] / n if reg_seen else None, sums[2] / n)
        report.epochs.append(stats)
        if progress:
            progress(stats)
        log.debug("epoch %d: %s", epoch, stats)

    if evaluate:
        report.knn_acc_macro = knn_evaluate(online, ds, cfg.knn_k, cfg.knn_sharpening)
        if cfg.eval_linear:
            report.linear_acc_macro = linear_probe(online, ds, cfg.probe_epochs, seed=cfg.seed)
        if cfg.eval_spearman:
            report.spearman_geo = spearman_alignment(online, ds, lc.d_max, seed=cfg.seed)
    report.wallclock_s = time.perf_counter() - t0
    return online, report


# ------------------------------------------------------------------ evaluation

def _embed(enc: Encoder, ds: Dataset, idx: np.ndarray, t: int = 0) -> np.ndarray:
    return enc.features(to_input(ds.patches[idx, t]))


def macro_accuracy(y_true, y_pred, classes=None) -> float:
    """Per-class recall averaged over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = np.unique(y_true) if classes is None else classes
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in classes]))


def knn_predict(train_emb, train_labels, test_emb, k: int = 10, sharpening: float = 0.9,
                n_classes: int | None = None) -> np.ndarray:
    """Similarity-weighted vote of the ``k`` nearest (cosine) training embeddings.

    Each neighbour adds ``exp(sim / (1 - sharpening))`` to its class; ties go
    to the lowest class index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    if k > len(train_emb):
        raise ValueError(f"k={k} exceeds the {len(train_emb)} training items")
    temp = 1.0 - sharpening
    a = train_emb / np.linalg.norm(train_emb, axis=1, keepdims=True)
    b = test_emb / np.linalg.norm(test_emb, axis=1, keepdims=True)
    train_labels = np.asarray(train_labels)
    n_classes = n_classes or int(train_labels.max()) + 1
    preds = np.empty(len(b), dtype=np.int64)
    for s in range(0, len(b), 512):
        sim = b[s:s + 512] @ a.T
        top = np.argpartition(-sim, k - 1, axis=1)[:, :k]
        top_sim = np.take_along_axis(sim, top, axis=1)
        w = np.exp((top_sim - 1.0) / temp)  # shifted by the max possible similarity
        scores = np.zeros((len(top), n_classes))
        np.add.at(scores, (np.arange(len(top))[:, None], train_labels[top]), w)
        preds[s:s + 512] = np.argmax(scores, axis=1)
    return preds


def knn_evaluate(enc: Encoder, ds: Dataset, k: int = 10, sharpening: float = 0.9) -> float:
    if len(ds.train) == 0 or len(ds.test) == 0:
        raise ValueError("dataset has no train/test split")
    tr = _embed(enc, ds, ds.train)
    te = _embed(enc, ds, ds.test)
    pred = knn_predict(tr, ds.labels[ds.train], te, k, sharpening, ds.n_classes)
    return macro_accuracy(ds.labels[ds.test], pred)


def train_linear(features, labels, n_classes: int, epochs: int, lr: float = 0.1,
                 batch_size: int = 128, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression by minibatch SGD (momentum 0.9) from zero weights."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    rng = np.random.default_rng([seed, 0x11E])
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            i = order[s:s + batch_size]
            logits = x[i] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[i]) / len(i)
            vw = 0.9 * vw + x[i].T @ g
            vb = 0.9 * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    return w, b


def linear_probe(enc: Encoder, ds: Dataset, epochs: int = 30, seed: int = 0) -> float:
    """Macro accuracy of a linear layer trained on frozen, standardized features.

    With zero epochs every logit is zero and argmax picks class 0.
    """
    tr = _embed(enc, ds, ds.train)
    te = _embed(enc, ds, ds.test)
    return probe_features(tr, ds.labels[ds.train], te, ds.labels[ds.test], ds.n_classes, epochs, seed)


def probe_features(tr, ytr, te, yte, n_classes: int, epochs: int, seed: int = 0) -> float:
    mu, sd = tr.mean(axis=0), tr.std(axis=0) + 1e-8
    w, b = train_linear((tr - mu) / sd, ytr, n_classes, epochs, seed=seed)
    pred = np.argmax(((te - mu) / sd) @ w + b, axis=1)
    return macro_accuracy(yte, pred)


def spearman_from_arrays(emb, coords, d_max: float, max_anchors: int = 512, seed: int = 0,
                         min_neighbors: int = 3) -> float:
    """Mean per-anchor Spearman correlation of geodesic vs embedding distance.

    Only neighbours within ``d_max`` of the anchor count; anchors with fewer
    than ``min_neighbors`` of them are skipped. Returns NaN when no anchor
    qualifies (the metric is undefined, not zero).
    """
    emb = np.asarray(emb, dtype=np.float64)
    n = len(emb)
    if n < 3:
        raise ValueError("spearman alignment needs at least 3 samples")
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    anchors = np.arange(n)
    if n > max_anchors:
        anchors = np.sort(np.random.default_rng([seed, 0x5FE]).choice(n, max_anchors, replace=False))
    rhos = []
    for a in anchors:
        lon, lat = coords[a]
        d = distances_from(coords, lon, lat)
        sel = (d <= d_max)
        sel[a] = False
        if sel.sum() < min_neighbors:
            continue
        gd = rankdata(d[sel])
        ed = rankdata(1.0 - e[sel] @ e[a])
        if np.ptp(gd) == 0 or np.ptp(ed) == 0:
            continue
        rhos.append(np.corrcoef(gd, ed)[0, 1])
    return float(np.mean(rhos)) if rhos else math.nan


def spearman_alignment(enc: Encoder, ds: Dataset, d_max: float, seed: int = 0) -> float:
    idx = np.arange(ds.n_locations)
    return spearman_from_arrays(_embed(enc, ds, idx), ds.coords, d_max, seed=seed)


def export_embeddings(enc: Encoder, ds: Dataset, out_path) -> Path:
    """Write little-endian float32 [N, D] features plus a JSON sidecar."""
    out_path = Path(out_path)
    emb = _embed(enc, ds, np.arange(ds.n_locations)).astype("<f4")
    out_path.write_bytes(emb.tobytes())
    sidecar = {"shape": list(emb.shape), "dtype": "<f4",
               "manifest": str(Path(ds.path) / "manifest.json"), "timestamp": 0}
    out_path.with_suffix(out_path.suffix + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return out_path


# ------------------------------------------------------------------ ablations

def grid_variant(axis: str, point, base: RunConfig, ds: Dataset | None = None) -> RunConfig:
    """Config for one grid point of an ablation axis."""
    if axis == "augmentation":
        return replace(base, extra_aug="" if point in ("baseline", "", None) else str(point))
    if axis == "cardinality":
        n_train = len(ds.train) if ds is not None else None
        frac = float(point)
        if not 0 < frac <= 1:
            raise ValueError(f"cardinality fraction must lie in (0, 1], got {point}")
        size = int(round(frac * n_train)) if n_train else 0
        return replace(base, subset_size=0 if frac == 1 else max(size, base.batch_size))
    if axis == "temporal":
        if point not in ("on", "off"):
            raise ValueError(f"temporal grid points are 'on'/'off', got {point!r}")
        return replace(base, temporal_views=point, flatten_timestamps=(point == "off"))
    if axis == "patch_size":
        return replace(base, crop_size=int(point))
    if axis == "alpha_dmax":
        alpha, d_max = point
        return replace(base, loss=replace(base.loss, alpha=float(alpha), d_max=float(d_max)))
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _point_label(point) -> str:
    if isinstance(point, (tuple, list)):
        return "/".join(str(p) for p in point)
    return str(point)


def _run_job(args):
    cfg, axis, label = args
    _, rep = pretrain(cfg)
    rep.axis, rep.grid_point = axis, label
    return rep


def run_ablation(axis: str, grid, base_cfg: RunConfig, seeds=(0, 1, 2, 3, 4), threads: int = 1,
                 ds: Dataset | None = None) -> list[dict]:
    """Pre-train and evaluate every (grid point, seed); returns CSV rows.

    One final-epoch row per run, then one ``seed="mean±std"`` summary row per
    grid point whose numeric cells read ``mean±std``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if ds is None and axis == "cardinality":
        ds = load_dataset(base_cfg.dataset)
    jobs = []
    for point in grid:
        variant = grid_variant(axis, point, base_cfg, ds)
        for s in seeds:
            jobs.append((replace(variant, seed=int(s)), axis, _point_label(point)))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_job, jobs))
    elif ds is not None:
        reports = []
        for cfg, ax, label in jobs:
            _, rep = pretrain(cfg, ds)
            rep.axis, rep.grid_point = ax, label
            reports.append(rep)
    else:
        reports = [_run_job(j) for j in jobs]
    rows = []
    for point in grid:
        label = _point_label(point)
        group = [r.summary_row() for r in reports if r.grid_point == label]
        rows.extend(group)
        rows.append(_summary(group))
    return rows


_NUMERIC = ("loss_ssl", "loss_reg", "loss_total", "knn_acc_macro", "linear_acc_macro",
            "spearman_geo", "wallclock_s")


def _summary(group: list[dict]) -> dict:
    row = dict(group[0])
    row["run_id"] = row["run_id"].rsplit("-s", 1)[0] + "-summary"
    row["seed"] = "mean±std"
    for col in _NUMERIC:
        vals = [float(r[col]) for r in group if r[col] != ""]
        row[col] = f"{np.mean(vals):.6g}±{np.std(vals):.6g}" if vals else ""
    return row


def write_csv(rows: list[dict], path=None) -> str:
    """Write rows with the fixed column order; returns the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in CSV_COLUMNS})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
