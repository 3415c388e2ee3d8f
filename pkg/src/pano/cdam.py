"""Cross-dual attention between ERP features and rebuilt fixed-FoV features.

Spatial maps are N×N (N pixel positions) and channel maps are C×C; both are
row-softmaxed cross-Gram matrices of the two feature sets, compared by a
row-averaged KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, ResourceError
from .model import BnStats
from .projection import stitch_ffp
from .tensor import Tensor

KL_EPS = 1e-8
DEFAULT_SPATIAL_CAP = 4096 * 4096


@dataclass
class AttentionPair:
    M: Tensor
    M_prime: Tensor


def rebuild_features(ffp_feats: Sequence[Tensor]) -> Tensor:
    """Concatenate slab features along width so they match the ERP feature map."""
    if len({tuple(f.shape) for f in ffp_feats}) != 1:
        raise DimensionError(f"slab features differ in shape: {[f.shape for f in ffp_feats]}")
    return stitch_ffp(list(ffp_feats))


def _channel_stats(F: Tensor):
    if F.ndim == 3:
        axes = (1, 2)
        shape = (F.shape[0], 1, 1)
    elif F.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, F.shape[1], 1, 1)
    else:
        raise DimensionError(f"features must be C×h×w or N×C×h×w, got {F.shape}")
    mu = F.mean(axis=axes)
    centred = F - mu.reshape(shape)
    var = (centred * centred).mean(axis=axes)
    return mu, var


def loss_bns(F: Tensor, F_prime: Tensor, stats: BnStats) -> Tensor:
    """Squared L2 gaps between per-channel mean/variance of both maps and ``stats``."""
    target_mu = Tensor(stats.mean)
    target_var = Tensor(stats.var)
    total = None
    for feats in (F, F_prime):
        mu, var = _channel_stats(feats)
        if mu.shape != target_mu.shape:
            raise DimensionError(f"feature channels {mu.shape} do not match BN stats {target_mu.shape}")
        dm = mu - target_mu
        dv = var - target_var
        term = (dm * dm).sum() + (dv * dv).sum()
        total = term if total is None else total + term
    return total


def flatten_features(F: Tensor) -> Tensor:
    """C×h×w -> (h·w)×C."""
    if F.ndim != 3:
        raise DimensionError(f"expected C×h×w features, got {F.shape}")
    return F.reshape(F.shape[0], -1).T


def _check_pair(f: Tensor, f_prime: Tensor):
    if f.ndim != 2 or f.shape != f_prime.shape:
        raise DimensionError(f"attention expects two equal N×C matrices, got {f.shape} and {f_prime.shape}")


def spatial_attention(f: Tensor, f_prime: Tensor, cap: int = DEFAULT_SPATIAL_CAP) -> AttentionPair:
    """Row-softmax of ``f·f'ᵀ`` and of ``f'·fᵀ`` (each N×N)."""
    _check_pair(f, f_prime)
    n = f.shape[0]
    if n * n > cap:
        raise ResourceError(f"spatial attention of {n}×{n} exceeds cap {cap}; pool the features spatially first")
    return AttentionPair(T.softmax_rows(f @ f_prime.T), T.softmax_rows(f_prime @ f.T))


def channel_attention(f: Tensor, f_prime: Tensor) -> AttentionPair:
    """Row-softmax of ``fᵀ·f'`` and of ``f'ᵀ·f`` (each C×C)."""
    _check_pair(f, f_prime)
    return AttentionPair(T.softmax_rows(f.T @ f_prime), T.softmax_rows(f_prime.T @ f))


def kl_rows(M: Tensor, M_prime: Tensor, eps: float = KL_EPS) -> Tensor:
    """Mean over rows of ``Σ M·(log(M+ε) − log(M'+ε))``."""
    if M.shape != M_prime.shape:
        raise DimensionError(f"KL operands differ: {M.shape} vs {M_prime.shape}")
    diff = T.log(M + eps) - T.log(M_prime + eps)
    return (M * diff).sum(axis=-1).mean()


def loss_cda(sp: AttentionPair, ch: AttentionPair) -> Tensor:
    return kl_rows(sp.M, sp.M_prime) + kl_rows(ch.M, ch.M_prime)


def cross_dual_loss(F: Tensor, F_prime: Tensor, cap: int = DEFAULT_SPATIAL_CAP):
    """Attention maps and KL loss for one C×h×w pair; returns ``(loss, sp, ch)``."""
    f, fp = flatten_features(F), flatten_features(F_prime)
    sp = spatial_attention(f, fp, cap)
    ch = channel_attention(f, fp)
    return loss_cda(sp, ch), sp, ch


def attention_to_image(M: Tensor) -> np.ndarray:
    """Scale a map to 8-bit grayscale for inspection."""
    a = np.asarray(M.data, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return (scaled * 255).round().astype(np.uint8)
