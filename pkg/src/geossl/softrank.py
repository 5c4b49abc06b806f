"""Soft ranks by L2 projection onto the permutahedron.

The projection reduces to an isotonic regression that pool-adjacent-violators
solves in linear time. Its Jacobian is block-constant, which gives an exact
and cheap vector-Jacobian product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass(frozen=True)
class SoftRankConfig:
    epsilon: float = 1e-3
    direction: str = ASCENDING

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.direction not in (ASCENDING, DESCENDING):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class PavBlocks:
    """Partition of ``0..n-1`` into contiguous blocks.

    ``starts[b]`` is the first index of block ``b``; ``means[b]`` its value.
    """

    starts: np.ndarray
    means: np.ndarray
    n: int

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.n))

    def labels(self) -> np.ndarray:
        """Block id of each position."""
        return np.repeat(np.arange(len(self.starts)), self.sizes)


def isotonic_l2(y) -> tuple[np.ndarray, PavBlocks]:
    """Least-squares fit of ``y`` by a non-increasing sequence (PAV)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("isotonic_l2 expects a non-empty vector")
    if not np.all(np.isfinite(y)):
        raise ValueError("isotonic_l2: non-finite input")
    n = y.size
    starts = [0] * n
    sums = [0.0] * n
    counts = [0] * n
    top = -1
    for i, v in enumerate(y.tolist()):
        top += 1
        starts[top], sums[top], counts[top] = i, v, 1
        # merge while the newer block's mean reaches the older one's; pooling
        # exact ties keeps block means strictly decreasing
        while top > 0 and sums[top] * counts[top - 1] >= sums[top - 1] * counts[top]:
            sums[top - 1] += sums[top]
            counts[top - 1] += counts[top]
            top -= 1
    nb = top + 1
    st = np.array(starts[:nb], dtype=np.intp)
    means = np.array(sums[:nb]) / np.array(counts[:nb], dtype=np.float64)
    blocks = PavBlocks(starts=st, means=means, n=n)
    return np.repeat(means, blocks.sizes), blocks


def isotonic_vjp(adjoint, blocks: PavBlocks) -> np.ndarray:
    """VJP of ``isotonic_l2``: average the adjoint inside every block."""
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != (blocks.n,):
        raise ValueError(f"stale blocks: adjoint has shape {adjoint.shape}, blocks cover {blocks.n}")
    sizes = blocks.sizes
    sums = np.add.reduceat(adjoint, blocks.starts)
    return np.repeat(sums / sizes, sizes)


def _ascending_forward(s: np.ndarray, epsilon: float):
    """Ascending soft rank of one vector plus what the VJP needs."""
    n = s.size
    z = s / epsilon
    perm = np.argsort(-z, kind="stable")
    zs = z[perm]
    y = zs - np.arange(n, 0, -1, dtype=np.float64)
    v, blocks = isotonic_l2(y)
    out = np.empty(n)
    out[perm] = zs - v
    return out, (perm, blocks)


def _ascending_vjp(g: np.ndarray, perm: np.ndarray, blocks: PavBlocks, epsilon: float):
    gs = g[perm]
    gz_sorted = gs - isotonic_vjp(gs, blocks)
    gz = np.empty_like(g)
    gz[perm] = gz_sorted
    return gz / epsilon


def _validate(s: np.ndarray):
    if s.ndim not in (1, 2) or s.shape[-1] < 2:
        raise ValueError("soft_rank expects vectors of length >= 2")
    if not np.all(np.isfinite(s)):
        raise ValueError("soft_rank: non-finite input")


def soft_rank_values(s, cfg: SoftRankConfig = SoftRankConfig()):
    """Forward pass on a vector or row-wise on a matrix, no tape.

    Returns ``(ranks, residuals)`` where the residuals feed
    :func:`soft_rank_vjp`.
    """
    s = np.asarray(s, dtype=np.float64)
    _validate(s)
    sign = -1.0 if cfg.direction == DESCENDING else 1.0
    rows = s.reshape(-1, s.shape[-1]) * sign
    out = np.empty_like(rows)
    res = []
    for r in range(rows.shape[0]):
        out[r], rr = _ascending_forward(rows[r], cfg.epsilon)
        res.append(rr)
    return out.reshape(s.shape), res


def soft_rank_vjp(s, adjoint, residuals, cfg: SoftRankConfig = SoftRankConfig()) -> np.ndarray:
    """Adjoint of ``s`` given the adjoint of ``soft_rank(s)``."""
    s = np.asarray(s, dtype=np.float64)
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != s.shape:
        raise ValueError("adjoint shape does not match input")
    rows = adjoint.reshape(-1, s.shape[-1])
    if len(residuals) != rows.shape[0]:
        raise ValueError("stale residuals: row count mismatch")
    sign = -1.0 if cfg.direction == DESCENDING else 1.0
    out = np.empty_like(rows)
    for r, (perm, blocks) in enumerate(residuals):
        if blocks.n != rows.shape[1]:
            raise ValueError("stale blocks: size mismatch")
        out[r] = _ascending_vjp(rows[r], perm, blocks, cfg.epsilon)
    return (out * sign).reshape(s.shape)


def soft_rank(s, cfg: SoftRankConfig = SoftRankConfig()):
    """Differentiable 1-based ranks.

    Accepts a plain array (returns an array) or a :class:`~geossl.diffcore.Node`
    (returns a node whose backward uses the exact block-averaging VJP). 2-D
    inputs are ranked row by row.
    """
    if not isinstance(s, dc.Node):
        return soft_rank_values(s, cfg)[0]

    def fwd(sv):
        return soft_rank_values(sv, cfg)

    def vjp(g, res):
        return soft_rank_vjp(s.value, g, res, cfg)

    return dc.custom_op(fwd, vjp, s, name="soft_rank")


def hard_rank(s, direction: str = ASCENDING) -> np.ndarray:
    """Integer 1-based ranks, ties broken by ascending index."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ValueError("hard_rank needs at least one entry")
    key = -s if direction == DESCENDING else s
    order = np.argsort(key, axis=-1, kind="stable")
    return np.argsort(order, axis=-1, kind="stable") + 1
