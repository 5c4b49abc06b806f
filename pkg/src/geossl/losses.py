"""Contrastive objectives and the geographic regularizers.

All losses take L2-normalized embeddings as tape nodes and return scalar
nodes. Geographic quantities (distances, ranks, masks) never carry gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .geo import EARTH_RADIUS_KM, GeoBatch, geo_ranks, neighbor_distances, neighbor_mask
from .softrank import DESCENDING, SoftRankConfig, soft_rank

SSL_KINDS = ("infonce", "consistency")
GEO_KINDS = ("none", "basic", "rank")
BASIC_NORMALIZATIONS = ("none", "max_geodesic")


@dataclass
class LossConfig:
    alpha: float = 0.48
    d_max: float = 2500.0
    tau: float = 0.04
    epsilon: float = 1e-3
    ssl_kind: str = "infonce"
    geo_kind: str = "rank"
    geo_basic_normalization: str = "max_geodesic"
    # average RankReg over unmasked pairs instead of K(K-1)
    rank_active_pair_norm: bool = False
    earth_radius_km: float = EARTH_RADIUS_KM

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if self.ssl_kind not in SSL_KINDS:
            raise ValueError(f"ssl_kind must be one of {SSL_KINDS}")
        if self.geo_kind not in GEO_KINDS:
            raise ValueError(f"geo_kind must be one of {GEO_KINDS}")
        if self.geo_basic_normalization not in BASIC_NORMALIZATIONS:
            raise ValueError(f"geo_basic_normalization must be one of {BASIC_NORMALIZATIONS}")


@dataclass
class EmbeddingBatch:
    z: dc.Node  # (K, D) online embeddings
    z_prime: dc.Node  # (K, D) positive views
    queue: np.ndarray | None = None  # (M_q, D) detached negatives

    @property
    def k(self) -> int:
        return self.z.shape[0]


def info_nce(batch: EmbeddingBatch, tau: float) -> dc.Node:
    """Mean over anchors of ``-log softmax`` of the positive logit.

    Negatives are the other in-batch embeddings ``z_k`` (k != i) followed by
    the queue; the positive logit sits in the denominator too.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z, zp = batch.z, batch.z_prime
    k = batch.k
    nq = 0 if batch.queue is None else len(batch.queue)
    if k < 1 or (k - 1) + nq < 1:
        raise ValueError("info_nce needs at least one negative")
    pos = dc.reshape(dc.rowdot(z, zp), (k, 1))
    parts = [pos]
    if k > 1:
        parts.append(dc.offdiag(dc.similarity(z, z)))
    if nq:
        parts.append(dc.similarity(z, dc.constant(batch.queue)))
    logits = dc.scale(dc.concat(parts, axis=1), 1.0 / tau)
    per_anchor = dc.logsumexp(logits, axis=1) - dc.reshape(dc.scale(pos, 1.0 / tau), (k,))
    return dc.mean(per_anchor)


def consistency(batch: EmbeddingBatch) -> dc.Node:
    """Mean negative cosine similarity to a gradient-stopped target view."""
    if batch.k < 1:
        raise ValueError("consistency needs K >= 1")
    target = dc.stop_gradient(batch.z_prime)
    return dc.neg(dc.mean(dc.rowdot(batch.z, target)))


def _pairwise_similarities(z: dc.Node) -> dc.Node:
    return dc.offdiag(dc.similarity(z, z))


def geo_basic_reg(batch: EmbeddingBatch, gb: GeoBatch, cfg: LossConfig) -> dc.Node:
    """Squared gap between cosine distance and (scaled) geodesic distance."""
    k = batch.k
    if k < 2:
        raise ValueError("geo_basic_reg needs K >= 2")
    d = neighbor_distances(gb)
    if cfg.geo_basic_normalization == "max_geodesic":
        d = 2.0 * d / (math.pi * cfg.earth_radius_km)
    cos_dist = dc.sub(dc.constant(np.ones((k, k - 1))), _pairwise_similarities(batch.z))
    return dc.mean(dc.square(dc.sub(cos_dist, dc.constant(d))))


def rank_reg(batch: EmbeddingBatch, gb: GeoBatch, cfg: LossConfig) -> dc.Node:
    """Masked MSE between soft similarity ranks and hard geodesic ranks."""
    k = batch.k
    if k < 3:
        raise ValueError("rank_reg needs K >= 3")
    sims = _pairwise_similarities(batch.z)
    rs = soft_rank(sims, SoftRankConfig(cfg.epsilon, DESCENDING))
    rd = geo_ranks(gb).astype(np.float64)
    m = neighbor_mask(gb)
    sq = dc.mul(dc.square(dc.sub(rs, dc.constant(rd))), dc.constant(m))
    if cfg.rank_active_pair_norm:
        active = m.sum()
        if active == 0:
            return dc.scale(dc.sum(sq), 0.0)
        return dc.scale(dc.sum(sq), 1.0 / active)
    return dc.scale(dc.sum(sq), 1.0 / (k * (k - 1)))


def combine(l_ssl: dc.Node, l_reg: dc.Node, alpha: float) -> dc.Node:
    """``alpha * l_ssl + (1 - alpha) * l_reg``; the endpoints return an input untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return l_ssl
    if alpha == 0.0:
        return l_reg
    return dc.add(dc.scale(l_ssl, alpha), dc.scale(l_reg, 1.0 - alpha))


def ssl_loss(batch: EmbeddingBatch, cfg: LossConfig) -> dc.Node:
    if cfg.ssl_kind == "infonce":
        return info_nce(batch, cfg.tau)
    return consistency(batch)


def reg_loss(batch: EmbeddingBatch, gb: GeoBatch | None, cfg: LossConfig) -> dc.Node | None:
    if cfg.geo_kind == "none":
        return None
    if gb is None:
        raise ValueError(f"geo_kind={cfg.geo_kind!r} needs a GeoBatch")
    if cfg.geo_kind == "basic":
        return geo_basic_reg(batch, gb, cfg)
    return rank_reg(batch, gb, cfg)


def total_loss(batch: EmbeddingBatch, gb: GeoBatch | None, cfg: LossConfig):
    """Returns ``(total, l_ssl, l_reg)``; ``l_reg`` is None without a regularizer."""
    l_ssl = ssl_loss(batch, cfg)
    l_reg = reg_loss(batch, gb, cfg)
    if l_reg is None:
        return l_ssl, l_ssl, None
    return combine(l_ssl, l_reg, cfg.alpha), l_ssl, l_reg
