"""Collapse diagnostics, feature-norm saliency, linear probing and match inspection."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import matching, model, nn
from .data import AugConfig, Image, augment_pair, center_resize, load_dataset, load_image
from .errors import ConfigurationError
from .model import EncoderSpec, ModelState
from .training import Checkpoint, load_checkpoint

CheckpointLike = Union[str, Path, Checkpoint, ModelState]
DatasetLike = Union[str, Path, Sequence[Image]]

_CHUNK = 256


def _state(checkpoint: CheckpointLike) -> ModelState:
    if isinstance(checkpoint, ModelState):
        return checkpoint
    if isinstance(checkpoint, Checkpoint):
        return checkpoint.state
    return load_checkpoint(checkpoint).state


def _images(dataset: DatasetLike) -> list[Image]:
    images = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not images:
        raise ConfigurationError("empty dataset")
    return images


def _views(images: Sequence[Image], spec: EncoderSpec) -> np.ndarray:
    return np.stack([center_resize(im, spec.input_size) for im in images])


def _features(state: ModelState, images: Sequence[Image]):
    """Eval-mode online features in chunks: (feature maps, local rows, global projections)."""
    spec, params, stats = state.spec, state.online, state.online_stats
    fmaps, locals_, globals_ = [], [], []
    for start in range(0, len(images), _CHUNK):
        x = _views(images[start:start + _CHUNK], spec).astype(next(iter(params.values())).dtype)
        fmap = model.encode(params, x, spec, stats)
        fmaps.append(fmap)
        locals_.append(model.project_local(params, fmap, spec, stats))
        globals_.append(model.project_global(params, fmap, spec, stats))
    return np.concatenate(fmaps), np.concatenate(locals_), np.concatenate(globals_)


# --------------------------------------------------------------------------- diversity


@dataclass(frozen=True)
class DiversityReport:
    mean_pairwise_region_cosine: float
    region_feature_std: float
    global_feature_std: float
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


def region_statistics(local: np.ndarray, global_features: np.ndarray | None = None) -> DiversityReport:
    """Diversity statistics for region rows ``(N, n, D)`` and optional globals ``(N, D)``.

    Standard deviations are taken over L2-normalized rows, so they measure
    spread in direction rather than feature scale.
    """
    local = np.asarray(local, dtype=np.float64)
    if local.ndim == 2:
        local = local[None]
    n_img, n = local.shape[:2]
    if n_img == 0:
        raise ConfigurationError("no images to summarize")
    if n < 2:
        raise ConfigurationError("need at least 2 regions per image")
    sim = matching.similarity_matrix(local, local)
    off_diag = (sim.sum(axis=(1, 2)) - np.trace(sim, axis1=1, axis2=2)) / (n * (n - 1))
    unit = nn.l2_normalize(local)
    region_std = unit.std(axis=1).mean(axis=1).mean()
    if global_features is None:
        global_std = 0.0
    else:
        g = nn.l2_normalize(np.asarray(global_features, dtype=np.float64))
        global_std = float(g.std(axis=0).mean()) if len(g) > 1 else 0.0
    return DiversityReport(float(off_diag.mean()), float(region_std), global_std, n_img)


def diversity_report(checkpoint: CheckpointLike, dataset: DatasetLike, sample_count: int,
                     seed: int) -> DiversityReport:
    """Region-collapse statistics of the online local projector on centre-resized images."""
    images = _images(dataset)
    if not 1 <= sample_count <= len(images):
        raise ConfigurationError(f"sample_count must be in [1, {len(images)}], got {sample_count}")
    picks = np.sort(np.random.default_rng(seed).choice(len(images), sample_count, replace=False))
    _, local, glob = _features(_state(checkpoint), [images[i] for i in picks])
    return region_statistics(local, glob)


# --------------------------------------------------------------------------- saliency


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    heatmap: np.ndarray     # (H_f, W_f), values in [0, 1]
    render: np.ndarray      # nearest-neighbour upsample to the input resolution


def heatmap_from_feature_map(feature_map: np.ndarray) -> np.ndarray:
    """Per-cell L2 norm of a (C, H, W) map, min-max scaled; a flat map gives zeros."""
    norms = np.sqrt((np.asarray(feature_map, dtype=np.float64) ** 2).sum(axis=0))
    lo, hi = norms.min(), norms.max()
    if hi - lo <= 0 or hi <= 0:
        return np.zeros_like(norms)
    return (norms - lo) / (hi - lo)


def upsample_nearest(heatmap: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = heatmap.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return heatmap[rows][:, cols]


def saliency_map(checkpoint: CheckpointLike, image: Image | str | Path) -> SaliencyMap:
    state = _state(checkpoint)
    if not isinstance(image, Image):
        image = load_image(image)
    view = _views([image], state.spec)
    fmap = model.encode(state.online, view, state.spec, state.online_stats)[0]
    heat = heatmap_from_feature_map(fmap)
    return SaliencyMap(heat, upsample_nearest(heat, state.spec.input_size, state.spec.input_size))


def write_pgm(values: np.ndarray, path: str | Path) -> Path:
    """Binary 8-bit PGM (P5) of a [0, 1] matrix."""
    path = Path(path)
    data = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return path


# --------------------------------------------------------------------------- linear probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.1
    train_fraction: float = 0.8
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("probe epochs must be >= 1 and lr > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    classes: int
    epochs: int

    def to_dict(self) -> dict:
        return asdict(self)


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * train_fraction))
    cut = min(max(cut, 1), n - 1)
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, seed: int,
                     cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Softmax regression by full-batch gradient descent on a seeded 80/20 split."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigurationError("linear probe needs at least 2 classes")
    y = np.searchsorted(classes, y)
    train, test = split_indices(len(y), seed, cfg.train_fraction)
    if cfg.standardize:
        mean = x[train].mean(axis=0)
        std = x[train].std(axis=0)
        x = (x - mean) / np.where(std > 0, std, 1.0)
    k = classes.size
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    xt, yt = x[train], y[train]
    onehot = np.eye(k)[yt]
    for _ in range(cfg.epochs):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        d = (prob - onehot) / len(yt)
        w -= cfg.lr * (xt.T @ d)
        b -= cfg.lr * d.sum(axis=0)

    def accuracy(idx):
        return float(np.mean(np.argmax(x[idx] @ w + b, axis=1) == y[idx]))

    return ProbeResult(accuracy(train), accuracy(test), int(k), cfg.epochs)


def backbone_features(checkpoint: CheckpointLike, images: Sequence[Image]) -> np.ndarray:
    """Global-average-pooled final backbone map (pre-projector), eval mode."""
    fmaps, _, _ = _features(_state(checkpoint), images)
    return fmaps.mean(axis=(2, 3))


def linear_probe(checkpoint: CheckpointLike, dataset: DatasetLike, seed: int = 0,
                 cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    images = _images(dataset)
    if any(im.label is None for im in images):
        raise ConfigurationError("linear probe needs a labelled dataset")
    labels = np.array([im.label for im in images])
    return fit_linear_probe(backbone_features(checkpoint, images), labels, seed, cfg)


def random_init_state(spec: EncoderSpec = EncoderSpec(), seed: int = 0) -> ModelState:
    """Untrained encoder, the baseline for the probe comparison."""
    return model.init_model_state(spec, seed)


# --------------------------------------------------------------------------- match inspection


def match_inspect(teacher: CheckpointLike, image: Image | str | Path, seed: int,
                  aug: AugConfig | None = None) -> dict:
    """Teacher-guided matchings for one augmented pair, with full similarity matrices."""
    source = _state(teacher)
    state = model.attach_teacher(source.copy(), source.online, source.online_stats)
    if not isinstance(image, Image):
        image = load_image(image)
    cfg = aug if aug is not None else AugConfig(output_size=state.spec.input_size)
    pair = augment_pair(image, cfg, seed)
    t_a = model.teacher_regions(state, pair.view_a.pixels)
    t_b = model.teacher_regions(state, pair.view_b.pixels)
    h, w = state.spec.grid()
    report = {
        "seed": int(seed),
        "grid": [h, w],
        "view_seeds": [pair.seed_a, pair.seed_b],
        "most_dissimilar": {
            "a": matching.find_most_dissimilar(t_a).to_json(matching.similarity_matrix(t_a, t_a)),
            "b": matching.find_most_dissimilar(t_b).to_json(matching.similarity_matrix(t_b, t_b)),
        },
        "most_similar": {
            "a_to_b": matching.find_most_similar(t_a, t_b).to_json(matching.similarity_matrix(t_a, t_b)),
            "b_to_a": matching.find_most_similar(t_b, t_a).to_json(matching.similarity_matrix(t_b, t_a)),
        },
    }
    return report
