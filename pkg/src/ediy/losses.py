"""BYOL, region-diversity and region-invariance losses and their weighted sum.

Every loss is stated per image and averaged over the batch.  Inputs may be a
single image (``(D,)`` globals, ``(n, D)`` regions) or a batch (``(N, D)``,
``(N, n, D)``).  The ``*_and_grad`` variants also return gradients for the
inputs that receive them; target, teacher and donor features never do, and
matchings are treated as constants.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, UsageError
from .matching import (
    MOST_DISSIMILAR,
    MOST_SIMILAR,
    RANDOM_REGION,
    InstanceNegative,
    MatchAssignment,
)
from .nn import cosine_rows, cosine_rows_backward


@dataclass(frozen=True)
class LossWeights:
    """lambda1 weighs R-DEM, lambda2 R-IEM, lambda3 BYOL."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    byol: float
    rdem: float
    riem: float
    weights: LossWeights
    total: float

    def to_log(self, step: int) -> dict:
        return {"step": step, "byol": self.byol, "rdem": self.rdem, "riem": self.riem, "total": self.total}


def _batched(*arrays: np.ndarray, ndim: int) -> tuple[list[np.ndarray], bool]:
    arrays = [np.asarray(a) for a in arrays]
    single = arrays[0].ndim == ndim - 1
    out = [a[None] if single else a for a in arrays]
    shapes = {a.shape for a in out}
    if len(shapes) != 1 or out[0].ndim != ndim:
        raise DimensionError(f"loss inputs must share one shape, got {sorted(shapes)}")
    return out, single


def _indices(assign, expected_modes: tuple[str, ...], within_view: bool, shape: tuple[int, int]) -> np.ndarray:
    if isinstance(assign, MatchAssignment):
        if assign.mode not in expected_modes or assign.within_view != within_view:
            kind = "within-view" if within_view else "cross-view"
            raise UsageError(f"expected a {kind} assignment, got mode {assign.mode!r}")
        idx = assign.indices
    else:
        idx = np.asarray(assign)
    idx = np.broadcast_to(idx, shape) if idx.ndim == 1 else idx
    if idx.shape != shape:
        raise DimensionError(f"assignment shape {idx.shape} does not match regions {shape}")
    return idx


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(x, idx[..., None], axis=1)


def _scatter_add(shape, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros(shape, dtype=values.dtype)
    batch = np.arange(shape[0])[:, None]
    np.add.at(out, (batch, idx), values)
    return out


# --------------------------------------------------------------------------- BYOL


def byol_loss_and_grad(f_a, g_b, g_a, f_b):
    """4 - 2 cos(f_a, g_b) - 2 cos(g_a, f_b); gradients for ``f_a`` and ``f_b`` only."""
    (f_a, g_b, g_a, f_b), single = _batched(f_a, g_b, g_a, f_b, ndim=2)
    n = f_a.shape[0]
    value = float(np.mean(4.0 - 2.0 * cosine_rows(f_a, g_b) - 2.0 * cosine_rows(g_a, f_b)))
    up = np.full(n, -2.0 / n, dtype=f_a.dtype)
    d_fa, _ = cosine_rows_backward(f_a, g_b, up)
    _, d_fb = cosine_rows_backward(g_a, f_b, up)
    if single:
        d_fa, d_fb = d_fa[0], d_fb[0]
    return value, (d_fa, d_fb)


def byol_loss(f_a, g_b, g_a, f_b) -> float:
    return byol_loss_and_grad(f_a, g_b, g_a, f_b)[0]


# --------------------------------------------------------------------------- R-DEM


def _rdem_view(x: np.ndarray, idx: np.ndarray):
    n_img, n_reg = x.shape[:2]
    partner = _gather(x, idx)
    cos = cosine_rows(x, partner)
    up = np.full(cos.shape, 1.0 / (n_img * n_reg), dtype=x.dtype)
    d_self, d_partner = cosine_rows_backward(x, partner, up)
    return float(cos.mean(axis=1).mean()), d_self + _scatter_add(x.shape, idx, d_partner)


def rdem_loss_and_grad(local_a, assign_a, local_b, assign_b):
    """Mean cosine of each region with its within-view partner, summed over both views.

    Both members of a pair are online features, so both receive gradient.
    """
    (local_a, local_b), single = _batched(local_a, local_b, ndim=3)
    shape = local_a.shape[:2]
    modes = (MOST_DISSIMILAR, RANDOM_REGION)
    idx_a = _indices(assign_a, modes, True, shape)
    idx_b = _indices(assign_b, modes, True, shape)
    va, da = _rdem_view(local_a, idx_a)
    vb, db = _rdem_view(local_b, idx_b)
    if single:
        da, db = da[0], db[0]
    return va + vb, (da, db)


def rdem_loss(local_a, assign_a, local_b, assign_b) -> float:
    return rdem_loss_and_grad(local_a, assign_a, local_b, assign_b)[0]


def _negatives(neg, shape) -> np.ndarray:
    if isinstance(neg, InstanceNegative):
        feats = neg.features[None]
    elif isinstance(neg, (list, tuple)) and neg and isinstance(neg[0], InstanceNegative):
        feats = np.stack([n.features for n in neg])
    else:
        feats = np.asarray(neg)
        if feats.ndim == 2:
            feats = feats[None]
    if feats.shape[:2] != shape[:2]:
        raise DimensionError(f"negatives of shape {feats.shape} do not cover regions {shape}")
    if feats.shape[-1] != shape[-1]:
        raise ConfigurationError(
            f"instance negatives need local dim == global dim, got {shape[-1]} and {feats.shape[-1]}"
        )
    return feats


def rdem_instance_variant_and_grad(local_a, local_b, negatives_a, negatives_b):
    """R-DEM with each region's partner replaced by a donor image's global feature."""
    local_a, local_b = np.asarray(local_a), np.asarray(local_b)
    single = local_a.ndim == 2
    if single:
        local_a, local_b = local_a[None], local_b[None]
    if local_a.shape != local_b.shape:
        raise DimensionError(f"view shapes differ: {local_a.shape} vs {local_b.shape}")
    total, grads = 0.0, []
    for x, neg in ((local_a, negatives_a), (local_b, negatives_b)):
        donors = _negatives(neg, x.shape).astype(x.dtype)
        cos = cosine_rows(x, donors)
        up = np.full(cos.shape, 1.0 / cos.size, dtype=x.dtype)
        d, _ = cosine_rows_backward(x, donors, up)
        total += float(cos.mean(axis=1).mean())
        grads.append(d[0] if single else d)
    return total, tuple(grads)


def rdem_instance_variant(local_a, local_b, negatives_a, negatives_b) -> float:
    return rdem_instance_variant_and_grad(local_a, local_b, negatives_a, negatives_b)[0]


# --------------------------------------------------------------------------- R-IEM


def riem_loss_and_grad(local_f_a, local_g_b, assign_a, local_f_b, local_g_a, assign_b):
    """2 - mean cos(f_a_j, g_b[R_a_j]) - mean cos(f_b_j, g_a[R_b_j]); online rows only."""
    (f_a, g_b, f_b, g_a), single = _batched(local_f_a, local_g_b, local_f_b, local_g_a, ndim=3)
    shape = f_a.shape[:2]
    modes = (MOST_SIMILAR, RANDOM_REGION)
    idx_a = _indices(assign_a, modes, False, shape)
    idx_b = _indices(assign_b, modes, False, shape)
    total = 2.0
    grads = []
    for f, g, idx in ((f_a, g_b, idx_a), (f_b, g_a, idx_b)):
        matched = _gather(g, idx)
        cos = cosine_rows(f, matched)
        total -= float(cos.mean(axis=1).mean())
        up = np.full(cos.shape, -1.0 / cos.size, dtype=f.dtype)
        d, _ = cosine_rows_backward(f, matched, up)
        grads.append(d[0] if single else d)
    return total, tuple(grads)


def riem_loss(local_f_a, local_g_b, assign_a, local_f_b, local_g_a, assign_b) -> float:
    return riem_loss_and_grad(local_f_a, local_g_b, assign_a, local_f_b, local_g_a, assign_b)[0]


# --------------------------------------------------------------------------- composite


def composite_loss(byol: float, rdem: float, riem: float, weights: LossWeights) -> LossBreakdown:
    for name, value in (("byol", byol), ("rdem", rdem), ("riem", riem)):
        if not math.isfinite(value):
            raise NumericError(f"loss component {name} is not finite ({value})")
    total = weights.lambda1 * rdem + weights.lambda2 * riem + weights.lambda3 * byol
    return LossBreakdown(float(byol), float(rdem), float(riem), weights, float(total))

