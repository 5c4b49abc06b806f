"""MLP encoder, EMA target network, negative queue, SGD, checkpoints."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

MOMENTUM_START = 0.996
CHECKPOINT_MAGIC = b"GSLC"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    in_dim: int = 4 * 16 * 16
    hidden: int = 256
    dim: int = 64  # backbone output, used for evaluation
    proj_dim: int = 32  # projection head output, used for losses

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "fc1.w": (self.in_dim, self.hidden), "fc1.b": (self.hidden,),
            "fc2.w": (self.hidden, self.hidden), "fc2.b": (self.hidden,),
            "fc3.w": (self.hidden, self.dim), "fc3.b": (self.dim,),
            "head.w": (self.dim, self.proj_dim), "head.b": (self.proj_dim,),
        }


@dataclass
class Encoder:
    cfg: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cfg.layer_shapes().items():
            if name.endswith(".w"):
                params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: EncoderConfig) -> "Encoder":
        return cls(cfg, {n: np.zeros(s) for n, s in cfg.layer_shapes().items()})

    def copy(self) -> "Encoder":
        return Encoder(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def leaves(self) -> dict[str, dc.Node]:
        return {k: dc.leaf(v, name=k) for k, v in self.params.items()}

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.cfg.in_dim:
            raise ValueError(f"input has {x.shape[1]} features, encoder expects {self.cfg.in_dim}")
        return x

    def forward(self, x, nodes: dict[str, dc.Node] | None = None, head: bool = True) -> dc.Node:
        """Un-normalized output; ``nodes`` defaults to constants (no gradient)."""
        p = nodes if nodes is not None else {k: dc.constant(v) for k, v in self.params.items()}
        h = dc.constant(self._check_input(x))
        h = dc.relu(dc.add(dc.matmul(h, p["fc1.w"]), p["fc1.b"]))
        h = dc.relu(dc.add(dc.matmul(h, p["fc2.w"]), p["fc2.b"]))
        h = dc.add(dc.matmul(h, p["fc3.w"]), p["fc3.b"])
        if not head:
            return h
        return dc.add(dc.matmul(dc.relu(h), p["head.w"]), p["head.b"])

    def encode(self, x, nodes: dict[str, dc.Node] | None = None) -> dc.Node:
        """L2-normalized projection-head embeddings, shape (K, proj_dim)."""
        return dc.l2_normalize_rows(self.forward(x, nodes))

    def features(self, x, batch_size: int = 1024) -> np.ndarray:
        """Backbone features for evaluation, computed without a tape."""
        x = self._check_input(x)
        p = self.params
        out = []
        for i in range(0, len(x), batch_size):
            h = np.maximum(x[i:i + batch_size] @ p["fc1.w"] + p["fc1.b"], 0.0)
            h = np.maximum(h @ p["fc2.w"] + p["fc2.b"], 0.0)
            out.append(h @ p["fc3.w"] + p["fc3.b"])
        return np.concatenate(out, axis=0)

    # checkpoint helpers
    def to_bytes(self) -> bytes:
        return dump_arrays(self.params)

    @classmethod
    def from_bytes(cls, cfg: EncoderConfig, blob: bytes) -> "Encoder":
        params = load_arrays(blob)
        expected = cfg.layer_shapes()
        if {k: v.shape for k, v in params.items()} != expected:
            raise ValueError("checkpoint does not match encoder configuration")
        return cls(cfg, params)


def ema_update(target: Encoder, online: Encoder, m: float) -> None:
    """In place: ``target <- m * target + (1 - m) * online``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    if target.params.keys() != online.params.keys() or any(
            target.params[k].shape != online.params[k].shape for k in target.params):
        raise ValueError("target and online encoders differ in structure")
    if m == 1.0:
        return
    for k, t in target.params.items():
        t *= m
        t += (1.0 - m) * online.params[k]


def momentum_at(step: int, total_steps: int, start: float = MOMENTUM_START) -> float:
    """Cosine ramp of the EMA momentum from ``start`` at step 0 to 1 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 1.0
    m = start + (1.0 - start) * (1.0 - math.cos(math.pi * step / total_steps)) / 2.0
    return min(m, 1.0)


class MemoryQueue:
    """FIFO ring buffer of detached, normalized embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.size = 0

    def push(self, emb) -> None:
        emb = np.asarray(emb, dtype=np.float64)
        k = emb.shape[0]
        if k > self.capacity:
            raise ValueError(f"cannot push {k} rows into a queue of capacity {self.capacity}")
        norms = np.linalg.norm(emb, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("queue entries must be L2-normalized")
        idx = (self.cursor + np.arange(k)) % self.capacity
        self.buffer[idx] = emb
        self.cursor = (self.cursor + k) % self.capacity
        self.size = min(self.capacity, self.size + k)

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def __len__(self):
        return self.size


def queue_push(q: MemoryQueue, embeddings) -> None:
    q.push(embeddings)


class SGD:
    """Heavy-ball SGD with optional weight decay and global-norm clipping."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the pre-clipping gradient norm."""
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if self.clip_norm and norm > self.clip_norm:
            grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            p -= self.lr * v
        return norm


def dump_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize named float64 arrays.

    Layout (little-endian): magic ``GSLC``, u8 version, u32 count, then per
    array: u16 name length, utf-8 name, u8 ndim, u32 extents, float64 data.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_arrays(blob: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(blob)
    if bytes(mv[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a GSLC checkpoint")
    version, count = struct.unpack_from("<BI", mv, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", mv, off)
        off += 2
        name = bytes(mv[off:off + nlen]).decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", mv, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", mv, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(mv, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path, enc: Encoder) -> None:
    with open(path, "wb") as fh:
        fh.write(enc.to_bytes())


def infer_config(params: dict[str, np.ndarray]) -> EncoderConfig:
    """Recover the layer sizes from stored weight shapes."""
    try:
        in_dim, hidden = params["fc1.w"].shape
        dim = params["fc3.w"].shape[1]
        proj_dim = params["head.w"].shape[1]
    except (KeyError, ValueError):
        raise ValueError("checkpoint lacks the expected encoder layers") from None
    return EncoderConfig(in_dim, hidden, dim, proj_dim)


def load_checkpoint(path, cfg: EncoderConfig | None = None) -> Encoder:
    """Read a checkpoint; ``cfg`` is inferred from the stored shapes when omitted."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if cfg is None:
        cfg = infer_config(load_arrays(blob))
    return Encoder.from_bytes(cfg, blob)
