"""Seeded augmentations for multispectral C x H x W patches in [0, 255].

Each pipeline position draws exactly two numbers from the pipeline stream
(a firing uniform and a child seed) whether or not it fires, so changing one
probability never shifts the randomness seen by later positions.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

# Base strengths before scaling by beta.
BASE_PARAMS: dict[str, dict[str, Any]] = {
    "rrc": {"scale": (0.2, 1.0), "ratio": (0.75, 1.33)},
    "hflip": {},
    "vflip": {},
    "flip": {},
    "rr90": {},
    "brightness": {"limit": 0.1},
    "contrast": {"limit": 0.1},
    "sharpness": {"alpha": 0.1},
    "gaussian_blur": {"sigma": 1.5},
    "gaussian_noise": {"var": 30.0},
    "solarize": {"threshold": 128.0},
    "posterize": {"num_bits": 4},
    "grayscale": {},
    "cutout": {"max_edge": 0.2},
    "grid_shuffle": {"grid_edge": 2},
    "shear": {"angle": 10.0},
    "translate": {"percent": 10.0},
}
_BETA_SCALED = {
    "brightness": "limit", "contrast": "limit", "sharpness": "alpha",
    "gaussian_blur": "sigma", "gaussian_noise": "var", "cutout": "max_edge",
    "grid_shuffle": "grid_edge", "shear": "angle", "translate": "percent",
}
TECHNIQUES = tuple(BASE_PARAMS)
# pure pixel rearrangements; their output needs no clipping
_PERMUTATIONS = frozenset({"hflip", "vflip", "flip", "rr90", "grid_shuffle"})


def base_params(technique: str, beta: int = 1) -> dict[str, Any]:
    """Table defaults for ``technique``, strength multiplied by ``beta``.

    For ``rrc`` the minimum crop scale is the strength.
    """
    if technique not in BASE_PARAMS:
        raise ValueError(f"unknown technique {technique!r}")
    params = dict(BASE_PARAMS[technique])
    key = _BETA_SCALED.get(technique)
    if key is not None:
        v = params[key] * beta
        params[key] = int(v) if isinstance(BASE_PARAMS[technique][key], int) else float(v)
    if technique == "rrc":
        lo = min(0.2 * beta, 1.0)
        params["scale"] = (lo, 1.0)
    return params


@dataclass
class AugSpec:
    technique: str
    p: float = 1.0
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.technique not in BASE_PARAMS:
            raise ValueError(f"unknown technique {self.technique!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.p}")
        merged = dict(BASE_PARAMS[self.technique])
        merged.update(self.params)
        _validate(self.technique, merged)
        self.params = merged


@dataclass
class AugPipeline:
    specs: list[AugSpec] = field(default_factory=list)
    output_size: int | None = None  # square crop size produced by rrc

    def apply(self, patch: np.ndarray, seed) -> np.ndarray:
        return apply(self, patch, seed)


def _validate(tech: str, p: dict[str, Any]):
    def need(ok, msg):
        if not ok:
            raise ValueError(f"{tech}: {msg}")

    if tech == "rrc":
        lo, hi = p["scale"]
        a, b = p["ratio"]
        need(0 < lo <= hi <= 1, f"scale must satisfy 0 < lo <= hi <= 1, got {p['scale']}")
        need(0 < a <= b, f"ratio must satisfy 0 < lo <= hi, got {p['ratio']}")
    elif tech in ("brightness", "contrast"):
        need(0 <= p["limit"] <= 1, "limit must lie in [0, 1]")
    elif tech == "sharpness":
        need(0 <= p["alpha"] <= 10, "alpha must lie in [0, 10]")
    elif tech == "gaussian_blur":
        need(p["sigma"] > 0, "sigma must be positive")
    elif tech == "gaussian_noise":
        need(p["var"] >= 0, "var must be non-negative")
    elif tech == "solarize":
        need(0 <= p["threshold"] <= 255, "threshold must lie in [0, 255]")
    elif tech == "posterize":
        need(int(p["num_bits"]) == p["num_bits"] and 1 <= p["num_bits"] <= 8,
             "num_bits must be an integer in [1, 8]")
    elif tech == "cutout":
        need(0 < p["max_edge"] <= 1, "max_edge must lie in (0, 1]")
    elif tech == "grid_shuffle":
        need(int(p["grid_edge"]) == p["grid_edge"] and p["grid_edge"] >= 1,
             "grid_edge must be a positive integer")
    elif tech == "shear":
        need(0 <= p["angle"] < 90, "angle must lie in [0, 90)")
    elif tech == "translate":
        need(0 <= p["percent"] < 100, "percent must lie in [0, 100)")


# ---------------------------------------------------------------- resampling

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill_outside: bool) -> np.ndarray:
    """Sample every channel of ``img`` at float pixel coordinates."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    wy = ys - y0
    wx = xs - x0
    out = np.zeros((c,) + ys.shape)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + dy, x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        if not fill_outside:
            inside = np.ones_like(inside)
        yy = np.clip(yy, 0, h - 1)
        xx = np.clip(xx, 0, w - 1)
        out += img[:, yy, xx] * (wgt * inside)
    return out


@functools.lru_cache(maxsize=4096)
def _interp_matrix(start: float, extent: float, n_in: int, size: int) -> np.ndarray:
    """(size, n_in) linear-interpolation weights for one axis of a crop (cached, read-only)."""
    pos = np.clip(start + (np.arange(size) + 0.5) / size * extent - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((size, n_in))
    rows = np.arange(size)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    m.flags.writeable = False
    return m


def resized_crop(img: np.ndarray, top: float, left: float, ch: float, cw: float, size: int) -> np.ndarray:
    """Crop a box and resize it bilinearly to ``size`` x ``size``."""
    h, w = img.shape[1:]
    wy = _interp_matrix(top, ch, h, size)
    wx = _interp_matrix(left, cw, w, size)
    return (wy @ img) @ wx.T


# ---------------------------------------------------------------- techniques

def _rrc(x, p, rng, size):
    _, h, w = x.shape
    size = size or h
    area = h * w
    lo, hi = p["scale"]
    log_r = (math.log(p["ratio"][0]), math.log(p["ratio"][1]))
    draws = rng.random((10, 4))
    for u_s, u_r, u_t, u_l in draws:
        target = area * (lo + (hi - lo) * u_s)
        ratio = math.exp(log_r[0] + (log_r[1] - log_r[0]) * u_r)
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(u_t * (h - ch + 1))
            left = int(u_l * (w - cw + 1))
            return resized_crop(x, top, left, ch, cw, size)
    # fallback: centre crop clamped to the allowed aspect range
    in_ratio = w / h
    if in_ratio < p["ratio"][0]:
        cw, ch = w, int(round(w / p["ratio"][0]))
    elif in_ratio > p["ratio"][1]:
        ch, cw = h, int(round(h * p["ratio"][1]))
    else:
        cw, ch = w, h
    return resized_crop(x, (h - ch) // 2, (w - cw) // 2, ch, cw, size)


def hflip(x):
    return x[:, :, ::-1].copy()


def vflip(x):
    return x[:, ::-1, :].copy()


def rr90(x, k: int):
    return np.rot90(x, k, axes=(1, 2)).copy()


def grayscale(x):
    return np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape).copy()


def solarize(x, threshold):
    return np.where(x >= threshold, 255.0 - x, x)


def posterize(x, num_bits):
    step = 2 ** (8 - int(num_bits))
    return np.floor(np.clip(x, 0, 255) / step) * step


def gaussian_blur(x, sigma):
    return ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect")


def grid_shuffle(x, grid_edge, rng):
    """Permute the cells of a ``grid_edge`` x ``grid_edge`` grid.

    When the patch does not divide evenly, cells are only exchanged with cells
    of identical shape.
    """
    _, h, w = x.shape
    g = int(grid_edge)
    ys = np.array_split(np.arange(h), min(g, h))
    xs = np.array_split(np.arange(w), min(g, w))
    cells = [(yi, xi) for yi in ys for xi in xs]
    out = x.copy()
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (yi, xi) in enumerate(cells):
        groups.setdefault((len(yi), len(xi)), []).append(i)
    for key in sorted(groups):
        members = groups[key]
        perm = rng.permutation(len(members))
        for dst, src in zip(members, (members[j] for j in perm)):
            dy, dx = cells[dst]
            sy, sx = cells[src]
            out[:, dy[0]:dy[-1] + 1, dx[0]:dx[-1] + 1] = x[:, sy[0]:sy[-1] + 1, sx[0]:sx[-1] + 1]
    return out


def cutout(x, max_edge, rng):
    _, h, w = x.shape
    limit = max(1, int(math.floor(max_edge * min(h, w))))
    edge = int(rng.integers(1, limit + 1))
    top = int(rng.integers(0, h - edge + 1))
    left = int(rng.integers(0, w - edge + 1))
    out = x.copy()
    out[:, top:top + edge, left:left + edge] = 0.0
    return out


def shear(x, angle_deg):
    """Horizontal shear about the patch centre, zero fill."""
    _, h, w = x.shape
    t = math.tan(math.radians(angle_deg))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = xx + t * (yy - (h - 1) / 2.0)
    return _bilinear(x, yy, src_x, fill_outside=True)


def translate(x, dy: int, dx: int):
    """Integer shift, zero fill."""
    _, h, w = x.shape
    out = np.zeros_like(x)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = x[:, ys, xs]
    return out


def transform(technique: str, patch: np.ndarray, params: dict[str, Any], rng: np.random.Generator,
              output_size: int | None = None) -> np.ndarray:
    """Apply one technique unconditionally."""
    p = dict(BASE_PARAMS.get(technique, {}))
    p.update(params)
    _validate(technique, p)
    return _dispatch(technique, np.asarray(patch, dtype=np.float64), p, rng, output_size)


def _dispatch(technique: str, x: np.ndarray, p: dict[str, Any], rng, output_size) -> np.ndarray:
    if technique == "rrc":
        out = _rrc(x, p, rng, output_size)
    elif technique == "hflip":
        out = hflip(x)
    elif technique == "vflip":
        out = vflip(x)
    elif technique == "flip":
        which = int(rng.integers(3))
        out = hflip(x) if which == 0 else vflip(x) if which == 1 else hflip(vflip(x))
    elif technique == "rr90":
        out = rr90(x, int(rng.integers(4)))
    elif technique == "brightness":
        out = x + 255.0 * rng.uniform(-p["limit"], p["limit"])
    elif technique == "contrast":
        c = rng.uniform(1.0 - p["limit"], 1.0 + p["limit"])
        m = x.mean(axis=(1, 2), keepdims=True)
        out = (x - m) * c + m
    elif technique == "sharpness":
        a = rng.uniform(0.0, p["alpha"])
        out = x + a * (x - gaussian_blur(x, 1.0))
    elif technique == "gaussian_blur":
        out = gaussian_blur(x, rng.uniform(0.1, max(0.1, p["sigma"])))
    elif technique == "gaussian_noise":
        var = rng.uniform(0.0, p["var"])
        out = x + rng.normal(0.0, math.sqrt(var), size=x.shape)
    elif technique == "solarize":
        out = solarize(x, p["threshold"])
    elif technique == "posterize":
        out = posterize(x, p["num_bits"])
    elif technique == "grayscale":
        out = grayscale(x)
    elif technique == "cutout":
        out = cutout(x, p["max_edge"], rng)
    elif technique == "grid_shuffle":
        out = grid_shuffle(x, p["grid_edge"], rng)
    elif technique == "shear":
        out = shear(x, rng.uniform(-p["angle"], p["angle"]))
    elif technique == "translate":
        _, h, w = x.shape
        f = p["percent"] / 100.0
        dy = int(round(rng.uniform(-f, f) * h))
        dx = int(round(rng.uniform(-f, f) * w))
        out = translate(x, dy, dx)
    else:
        raise ValueError(f"unknown technique {technique!r}")
    if technique in _PERMUTATIONS:
        return out
    return np.clip(out, 0.0, 255.0)


def apply(pipeline: AugPipeline, patch: np.ndarray, seed) -> np.ndarray:
    """Run ``pipeline`` on one patch; ``seed`` is anything ``default_rng`` accepts."""
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"patch must be C x H x W, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patch contains non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for spec in pipeline.specs:
        fire = rng.random()
        child = int(rng.integers(2**63))
        if fire < spec.p:
            # spec params were merged and validated when the AugSpec was built
            x = _dispatch(spec.technique, x, spec.params, np.random.default_rng(child),
                          pipeline.output_size)
    size = pipeline.output_size
    if size is not None and x.shape[1:] != (size, size):
        x = resized_crop(x, 0, 0, x.shape[1], x.shape[2], size)
    return x


def apply_batch(pipeline: AugPipeline, patches: np.ndarray, seed: int, stream: int = 0) -> np.ndarray:
    """Augment a stack of patches; item ``i`` uses stream ``(seed, stream, i)``."""
    return np.stack([apply(pipeline, p, np.random.default_rng([seed, stream, i]))
                     for i, p in enumerate(patches)])


def percentile_normalize(raw: np.ndarray, percentiles) -> np.ndarray:
    """Per-channel ``clip(value / p, 0, 1) * 255``."""
    raw = np.asarray(raw, dtype=np.float64)
    p = np.asarray(percentiles, dtype=np.float64).reshape(-1)
    if p.size != raw.shape[-3]:
        raise ValueError(f"need {raw.shape[-3]} percentiles, got {p.size}")
    if np.any(p <= 0):
        raise ValueError("percentiles must be positive")
    shape = (-1, 1, 1)
    return np.clip(raw / p.reshape(shape), 0.0, 1.0) * 255.0


def geometric_pipeline(output_size: int | None = None) -> AugPipeline:
    """RRC, flip and RR90 with the default probabilities."""
    return AugPipeline([
        AugSpec("rrc", 1.0, {"scale": (0.2, 1.0), "ratio": (0.75, 1.33)}),
        AugSpec("flip", 0.75),
        AugSpec("rr90", 0.75),
    ], output_size=output_size)


def standard_pipeline(output_size: int | None = None) -> AugPipeline:
    """RRC, contrast/brightness jitter, blur, grayscale, horizontal flip."""
    return AugPipeline([
        AugSpec("rrc", 1.0),
        AugSpec("contrast", 0.8, {"limit": 0.4}),
        AugSpec("brightness", 0.8, {"limit": 0.4}),
        AugSpec("gaussian_blur", 0.5),
        AugSpec("grayscale", 0.2),
        AugSpec("hflip", 0.5),
    ], output_size=output_size)


def pipeline_from_dict(doc: dict) -> AugPipeline:
    specs = []
    for i, entry in enumerate(doc.get("spec", [])):
        entry = dict(entry)
        try:
            tech = entry.pop("technique")
        except KeyError:
            raise ValueError(f"spec #{i} has no technique") from None
        p = float(entry.pop("p", 1.0))
        for k, v in list(entry.items()):
            if isinstance(v, list):
                entry[k] = tuple(v)
        specs.append(AugSpec(tech, p, entry))
    unknown = set(doc) - {"spec", "output_size"}
    if unknown:
        raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
    return AugPipeline(specs, doc.get("output_size"))


def load_pipeline(path) -> AugPipeline:
    """Parse a TOML pipeline file with ``[[spec]]`` tables in order."""
    with open(path, "rb") as fh:
        return pipeline_from_dict(tomllib.load(fh))


def pipeline_to_toml(pipeline: AugPipeline) -> str:
    lines = []
    if pipeline.output_size is not None:
        lines.append(f"output_size = {pipeline.output_size}")
    for spec in pipeline.specs:
        lines += ["", "[[spec]]", f'technique = "{spec.technique}"', f"p = {spec.p!r}"]
        for k, v in spec.params.items():
            if isinstance(v, (tuple, list)):
                v = "[" + ", ".join(repr(float(e)) for e in v) + "]"
            else:
                v = repr(v)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
