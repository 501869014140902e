"""Region matching: teacher-guided argmin/argmax and the random ablation samplers.

All functions accept a single image's region matrix ``(n, D)`` or a batch
``(N, n, D)``; batched inputs give batched ``(N, n)`` index arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PreconditionError
from .nn import EPS

MOST_DISSIMILAR = "most_dissimilar_within_view"
MOST_SIMILAR = "most_similar_cross_view"
RANDOM_REGION = "random_region"
RANDOM_INSTANCE = "random_instance_global"

WITHIN_VIEW = "within_view"
CROSS_VIEW = "cross_view"


@dataclass(frozen=True, eq=False)
class MatchAssignment:
    indices: np.ndarray
    mode: str
    within_view: bool
    seed: int | None = None

    def to_json(self, similarities: np.ndarray | None = None) -> dict:
        """``{mode, indices, similarities}``; the full similarity matrix when given."""
        out = {"mode": self.mode, "indices": self.indices.tolist()}
        if similarities is not None:
            out["similarities"] = np.asarray(similarities).tolist()
        if self.seed is not None:
            out["seed"] = int(self.seed)
        return out


@dataclass(frozen=True, eq=False)
class InstanceNegative:
    features: np.ndarray   # (n, D) donor global features, treated as constants
    donors: np.ndarray     # (n,) donor image indices
    anchor: int
    seed: int | None = None


def similarity_matrix(queries: np.ndarray, keys: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Entry (j, z) is the epsilon-guarded cosine of queries[j] and keys[z]."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"feature dimensions differ: {q.shape[-1]} vs {k.shape[-1]}")
    qn = np.maximum(np.sqrt((q * q).sum(-1)), eps)
    kn = np.maximum(np.sqrt((k * k).sum(-1)), eps)
    return (q / qn[..., None]) @ np.swapaxes(k / kn[..., None], -1, -2)


# BLAS may sum a row in a different order than its neighbour, so values that
# tie in exact arithmetic can differ in the last ulp; treat those as ties.
TIE_TOLERANCE = 1e-12


def _first_extreme(sim: np.ndarray, lowest: bool) -> np.ndarray:
    if lowest:
        best = sim.min(axis=-1, keepdims=True)
        hit = sim <= best + TIE_TOLERANCE
    else:
        best = sim.max(axis=-1, keepdims=True)
        hit = sim >= best - TIE_TOLERANCE
    return hit.argmax(axis=-1)


def find_most_dissimilar(regions: np.ndarray) -> MatchAssignment:
    """For every region, the index of its least similar other region in the same view."""
    regions = np.asarray(regions)
    n = regions.shape[-2]
    if n < 2:
        raise PreconditionError("need at least 2 regions to pick a dissimilar partner")
    sim = similarity_matrix(regions, regions)
    sim[..., np.arange(n), np.arange(n)] = np.inf
    return MatchAssignment(_first_extreme(sim, lowest=True), MOST_DISSIMILAR, within_view=True)


def find_most_similar(regions_a: np.ndarray, regions_b: np.ndarray) -> MatchAssignment:
    """For every region of view a, the index of its most similar region in view b."""
    regions_b = np.asarray(regions_b)
    if regions_b.shape[-2] < 1:
        raise PreconditionError("the key view has no regions")
    sim = similarity_matrix(regions_a, regions_b)
    return MatchAssignment(_first_extreme(sim, lowest=False), MOST_SIMILAR, within_view=False)


def sample_random_regions(n_query: int, n_key: int, mode: str, seed: int,
                          batch: int | None = None) -> MatchAssignment:
    """Uniform region draws; ``mode`` is ``"within_view"`` (self excluded) or ``"cross_view"``."""
    rng = np.random.default_rng(seed)
    shape = (n_query,) if batch is None else (batch, n_query)
    if mode == WITHIN_VIEW:
        if n_key < 2 or n_query > n_key:
            raise PreconditionError("within-view sampling needs n_key >= 2 and n_query <= n_key")
        idx = rng.integers(0, n_key - 1, size=shape)
        idx = idx + (idx >= np.arange(n_query))
        return MatchAssignment(idx, RANDOM_REGION, within_view=True, seed=seed)
    if mode == CROSS_VIEW:
        return MatchAssignment(rng.integers(0, n_key, size=shape), RANDOM_REGION, within_view=False, seed=seed)
    raise ValueError(f"unknown sampling mode {mode!r}")


def sample_instance_negatives(batch_globals: np.ndarray, anchor: int, n: int, seed: int) -> InstanceNegative:
    """Draw ``n`` donor global features uniformly from images other than ``anchor``."""
    batch_globals = np.asarray(batch_globals)
    size = batch_globals.shape[0]
    if size < 2:
        raise PreconditionError("instance negatives need a batch of at least 2 images")
    rng = np.random.default_rng(seed)
    donors = rng.integers(0, size - 1, size=n)
    donors = donors + (donors >= anchor)
    return InstanceNegative(batch_globals[donors], donors, anchor, seed)
