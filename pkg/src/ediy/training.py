"""Two-stage pipeline: BYOL teacher bootstrap, then region-aware pre-training.

A run directory holds ``train_log.jsonl`` (one JSON object per optimizer
step), ``latest/`` (rewritten atomically at every epoch end) and ``final/``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import matching, model, nn
from .data import AugConfig, Image, augment_view, load_dataset, view_seeds
from .errors import (
    ConfigurationError,
    IncompatibleCheckpointError,
    IntegrityError,
    NumericError,
    PreconditionError,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    byol_loss_and_grad,
    composite_loss,
    rdem_instance_variant_and_grad,
    rdem_loss_and_grad,
    riem_loss_and_grad,
)
from .model import EncoderSpec, ModelState

log = logging.getLogger(__name__)

BOOTSTRAP = "bootstrap_teacher"
EDIY = "ediy"
TG, R, R_INS = "TG", "R", "R_INS"

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
LOG_FILE = "train_log.jsonl"


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class SamplingConfig:
    rdem: str = TG
    riem: str = TG

    def __post_init__(self):
        if self.rdem not in (TG, R, R_INS):
            raise ConfigurationError(f"R-DEM sampling must be TG, R or R_INS, got {self.rdem!r}")
        if self.riem not in (TG, R):
            raise ConfigurationError(f"R-IEM sampling must be TG or R, got {self.riem!r}")

    @property
    def needs_teacher(self) -> bool:
        return TG in (self.rdem, self.riem)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trust_coeff: float = 0.001
    warmup_steps: int = 0

    def __post_init__(self):
        if self.name not in ("sgd", "lars"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'lars', got {self.name!r}")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigurationError("optimizer settings must be non-negative (lr > 0)")


_NESTED = {
    "weights": LossWeights,
    "sampling": SamplingConfig,
    "optimizer": OptimizerConfig,
    "aug": AugConfig,
    "model": EncoderSpec,
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = EDIY
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    tau: float = 0.99
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    accumulation_steps: int = 1
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0
    aug: AugConfig = field(default_factory=AugConfig)
    model: EncoderSpec = field(default_factory=EncoderSpec)
    dataset: str | None = None
    teacher: str | None = None
    bn_mode: str = "train"

    def __post_init__(self):
        if self.stage not in (BOOTSTRAP, EDIY):
            raise ConfigurationError(f"stage must be {BOOTSTRAP!r} or {EDIY!r}, got {self.stage!r}")
        if self.stage == BOOTSTRAP:
            # pure BYOL; region terms are still logged, with random matching
            object.__setattr__(self, "weights", LossWeights(0.0, 0.0, 1.0))
            object.__setattr__(self, "sampling", SamplingConfig(R, R))
        if self.accumulation_steps < 1:
            raise ConfigurationError("accumulation_steps must be >= 1")
        if self.batch_size < self.accumulation_steps:
            raise ConfigurationError("batch_size must be >= accumulation_steps")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigurationError("epochs and max_steps must be non-negative")
        if self.bn_mode not in ("train", "eval"):
            raise ConfigurationError("bn_mode must be 'train' or 'eval'")
        if self.aug.output_size != self.model.input_size:
            raise ConfigurationError("aug.output_size must equal model.input_size")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, EncoderSpec):
                value = value.to_dict()
            elif dataclasses.is_dataclass(value):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(value).items()}
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            nested = _NESTED.get(key)
            if nested is not None:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"config key {key!r} must be an object")
                fields = {f.name for f in dataclasses.fields(nested)}
                bad = sorted(set(value) - fields)
                if bad:
                    raise ConfigurationError(f"unknown keys in {key!r}: {', '.join(bad)}")
                value = nested(**value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config '{path}': {exc}") from exc
        return cls.from_dict(raw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- one step


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint64)[0])


def _region_assignments(cfg: TrainConfig, state: ModelState, xa, xb, seeds, n, zt_a, zt_b):
    """Matchings (or donor features) for R-DEM and R-IEM on one micro-batch."""
    sampling = cfg.sampling
    if sampling.needs_teacher:
        if state.teacher is None:
            raise ConfigurationError("TG sampling needs a teacher; none is loaded")
        t_a = model.teacher_regions(state, xa)
        t_b = model.teacher_regions(state, xb)

    if sampling.rdem == TG:
        rdem = (matching.find_most_dissimilar(t_a), matching.find_most_dissimilar(t_b))
    elif sampling.rdem == R:
        rdem = tuple(
            matching.MatchAssignment(
                np.stack([matching.sample_random_regions(n, n, matching.WITHIN_VIEW, _sub_seed(s, k)).indices
                          for s in seeds]),
                matching.RANDOM_REGION, within_view=True,
            )
            for k in (0, 1)
        )
    else:
        rdem = tuple(
            np.stack([matching.sample_instance_negatives(z, i, n, _sub_seed(s, k)).features
                      for i, s in enumerate(seeds)])
            for k, z in ((0, zt_a), (1, zt_b))
        )

    if sampling.riem == TG:
        riem = (matching.find_most_similar(t_a, t_b), matching.find_most_similar(t_b, t_a))
    else:
        riem = tuple(
            matching.MatchAssignment(
                np.stack([matching.sample_random_regions(n, n, matching.CROSS_VIEW, _sub_seed(s, k)).indices
                          for s in seeds]),
                matching.RANDOM_REGION, within_view=False,
            )
            for k in (2, 3)
        )
    return rdem, riem


def _micro_batch(state: ModelState, images: Sequence[Image], seeds, cfg: TrainConfig, stats: nn.ParamSet):
    """Forward + backward on one micro-batch; returns (components, grads)."""
    m = len(images)
    pairs = [view_seeds(int(s)) for s in seeds]
    xa = np.stack([augment_view(im.pixels, cfg.aug, sa) for im, (sa, _) in zip(images, pairs)])
    xb = np.stack([augment_view(im.pixels, cfg.aug, sb) for im, (_, sb) in zip(images, pairs)])
    x = np.concatenate([xa, xb]).astype(next(iter(state.online.values())).dtype)
    training = cfg.bn_mode == "train"

    out = model.online_forward(state, x, stats, training=training)
    zt, lt = model.target_forward(state, x, training=training)
    n = out.local.shape[1]
    rdem_assign, riem_assign = _region_assignments(cfg, state, xa, xb, seeds, n, zt[:m], zt[m:])

    p, loc = out.prediction, out.local
    w = cfg.weights
    byol, (d_pa, d_pb) = byol_loss_and_grad(p[:m], zt[m:], zt[:m], p[m:])
    if cfg.sampling.rdem == R_INS:
        rdem, (d_la, d_lb) = rdem_instance_variant_and_grad(loc[:m], loc[m:], *rdem_assign)
    else:
        rdem, (d_la, d_lb) = rdem_loss_and_grad(loc[:m], rdem_assign[0], loc[m:], rdem_assign[1])
    riem, (e_la, e_lb) = riem_loss_and_grad(loc[:m], lt[m:], riem_assign[0], loc[m:], lt[:m], riem_assign[1])

    d_pred = w.lambda3 * np.concatenate([d_pa, d_pb])
    d_local = w.lambda1 * np.concatenate([d_la, d_lb]) + w.lambda2 * np.concatenate([e_la, e_lb])
    grads = model.online_backward(out, d_pred.astype(x.dtype), d_local.astype(x.dtype))
    return (byol, rdem, riem), grads


def train_step(state: ModelState, batch: Sequence[Image], cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[ModelState, LossBreakdown]:
    """One optimizer step (over ``accumulation_steps`` micro-batches) plus one EMA update."""
    if not batch:
        raise PreconditionError("empty batch")
    if cfg.sampling.needs_teacher and state.teacher is None:
        raise ConfigurationError("TG sampling needs a teacher; none is loaded")
    seeds = rng.integers(0, 2**63 - 1, size=len(batch), dtype=np.int64)
    stats = dict(state.online_stats)
    total_n = len(batch)
    parts = np.zeros(3)
    acc: nn.GradSet | None = None
    for idx in np.array_split(np.arange(total_n), cfg.accumulation_steps):
        if idx.size == 0:
            continue
        try:
            comps, grads = _micro_batch(state, [batch[i] for i in idx], seeds[idx], cfg, stats)
        except NumericError as exc:
            raise NumericError(f"step {state.step + 1}: {exc}") from None
        share = idx.size / total_n
        parts += share * np.asarray(comps)
        if acc is None:
            acc = {k: share * g for k, g in grads.items()}
        else:
            for k, g in grads.items():
                acc[k] += share * g

    breakdown = composite_loss(parts[0], parts[1], parts[2], cfg.weights)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss at step {state.step + 1}")

    opt = cfg.optimizer
    lr = opt.lr * min(1.0, (state.step + 1) / opt.warmup_steps) if opt.warmup_steps else opt.lr
    acc = {k: v.astype(state.online[k].dtype, copy=False) for k, v in acc.items()}
    try:
        if opt.name == "lars":
            online, velocity = nn.lars_scale_step(state.online, acc, state.velocity, lr, opt.momentum,
                                                  opt.weight_decay, opt.trust_coeff)
        else:
            online, velocity = nn.sgd_momentum_step(state.online, acc, state.velocity, lr, opt.momentum,
                                                    opt.weight_decay)
    except NumericError as exc:
        raise NumericError(f"step {state.step + 1}: {exc}") from None

    online_no_pred = {k: v for k, v in online.items() if not k.startswith(model.PREDICTOR_PREFIX)}
    target, target_stats = nn.ema_update(
        online_no_pred, state.target, state.tau,
        {k: v for k, v in stats.items() if not k.startswith(model.PREDICTOR_PREFIX)},
    )
    new_state = ModelState(
        state.spec, online, dict(sorted(stats.items())), target, target_stats,
        state.teacher, state.teacher_stats, velocity, state.tau, state.step + 1, state.epoch,
    )
    return new_state, breakdown


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    manifest: dict
    state: ModelState
    config: TrainConfig
    path: Path | None = None


_GROUPS = ("online", "online_stats", "target", "target_stats", "velocity")


def save_checkpoint(state: ModelState, cfg: TrainConfig, path: str | Path) -> Path:
    """Write ``manifest.json`` plus one little-endian ``.bin`` per tensor, atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    table = []
    for group in _GROUPS:
        tensors = getattr(state, group)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            dtype = arr.dtype.newbyteorder("<")
            data = arr.astype(dtype, copy=False).tobytes(order="C")
            fname = f"{group}__{name}.bin"
            (tmp / fname).write_bytes(data)
            table.append({
                "name": f"{group}/{name}",
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "file": fname,
                "byte_length": len(data),
            })
    manifest = {
        "version": FORMAT_VERSION,
        "stage": cfg.stage,
        "step": state.step,
        "epoch": state.epoch,
        "tau": state.tau,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "tensors": table,
    }
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        path.rename(old)
    tmp.rename(path)
    if old.exists():
        shutil.rmtree(old)
    return path


def resolve_checkpoint_dir(path: str | Path) -> Path:
    """Accept a checkpoint directory or a run directory holding ``final/`` or ``latest/``."""
    path = Path(path)
    if (path / MANIFEST).exists():
        return path
    for sub in ("final", "latest"):
        if (path / sub / MANIFEST).exists():
            return path / sub
    raise ConfigurationError(f"no checkpoint found at '{path}'")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = resolve_checkpoint_dir(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest in '{path}': {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format version {manifest.get('version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    cfg = TrainConfig.from_dict(manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise IntegrityError("manifest config_hash does not match its stored config")
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for entry in manifest["tensors"]:
        name = entry["name"]
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        try:
            data = (path / entry["file"]).read_bytes()
        except OSError as exc:
            raise IntegrityError(f"tensor '{name}' is missing: {exc}") from exc
        if len(data) != entry["byte_length"] or len(data) != expected:
            raise IntegrityError(
                f"tensor '{name}' has {len(data)} bytes, expected {expected}"
            )
        arr = np.frombuffer(data, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        group, key = name.split("/", 1)
        groups[group][key] = arr
    state = ModelState(
        cfg.model, groups["online"], groups["online_stats"], groups["target"], groups["target_stats"],
        velocity=groups["velocity"], tau=float(manifest["tau"]), step=int(manifest["step"]),
        epoch=int(manifest["epoch"]),
    )
    return Checkpoint(manifest, state, cfg, path)


# --------------------------------------------------------------------------- runs


def _steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, n_images // batch_size)


def _epoch_batches(n_images: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n_images)
    if n_images <= batch_size:
        return [perm]
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n_images // batch_size)]


def _without_budget(cfg: TrainConfig) -> dict:
    # a run may be resumed with a longer budget; everything else must match
    return {k: v for k, v in cfg.to_dict().items() if k not in ("epochs", "max_steps")}


def _trim_log(path: Path, last_step: int) -> None:
    """Drop log lines past ``last_step`` (left behind by an interrupted run)."""
    if not path.exists():
        return
    keep = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


def load_teacher_into(state: ModelState, teacher: str | Path | Checkpoint) -> ModelState:
    ckpt = teacher if isinstance(teacher, Checkpoint) else load_checkpoint(teacher)
    return model.attach_teacher(state, ckpt.state.online, ckpt.state.online_stats)


def run_pretraining(
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    images: Sequence[Image] | None = None,
    teacher: str | Path | Checkpoint | None = None,
    resume: str | Path | None = None,
    dtype=np.float32,
) -> Checkpoint:
    """Train for ``cfg.epochs`` epochs (capped at ``cfg.max_steps`` optimizer steps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images is None:
        if cfg.dataset is None:
            raise ConfigurationError("no dataset path configured")
        images = load_dataset(cfg.dataset)
    if not images:
        raise ConfigurationError("empty dataset")

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if _without_budget(ckpt.config) != _without_budget(cfg):
            raise ConfigurationError("resume checkpoint was written with a different config")
        state = ckpt.state
    else:
        state = model.init_model_state(cfg.model, cfg.seed, cfg.tau, dtype)

    if cfg.sampling.needs_teacher:
        source = teacher if teacher is not None else cfg.teacher
        if source is None:
            raise ConfigurationError("TG sampling requires a teacher checkpoint")
        state = load_teacher_into(state, source)

    log_path = out / LOG_FILE
    if resume is not None:
        _trim_log(log_path, state.step)
    elif log_path.exists():
        log_path.unlink()

    spe = _steps_per_epoch(len(images), cfg.batch_size)
    total = cfg.epochs * spe
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    batches, batches_epoch = None, -1
    with log_path.open("a", encoding="utf-8") as fh:
        while state.step < total:
            epoch, position = divmod(state.step, spe)
            if epoch != batches_epoch:
                batches, batches_epoch = _epoch_batches(len(images), cfg.batch_size, cfg.seed, epoch), epoch
            batch = [images[i] for i in batches[position]]
            rng = np.random.default_rng([cfg.seed, 1, state.step])
            state, breakdown = train_step(state, batch, cfg, rng)
            fh.write(json.dumps(breakdown.to_log(state.step)) + "\n")
            fh.flush()
            if state.step % spe == 0:
                state.epoch = state.step // spe
                save_checkpoint(state, cfg, out / "latest")
            if state.step % 50 == 0:
                log.info("step %d total %.4f byol %.4f rdem %.4f riem %.4f", state.step,
                         breakdown.total, breakdown.byol, breakdown.rdem, breakdown.riem)

    final = save_checkpoint(state, cfg, out / "final")
    return load_checkpoint(final)


def bootstrap_teacher(cfg: TrainConfig, out_dir: str | Path, **kwargs) -> Checkpoint:
    """Stage 1: plain BYOL training whose online backbone becomes the frozen teacher."""
    if cfg.stage != BOOTSTRAP:
        cfg = dataclasses.replace(cfg, stage=BOOTSTRAP)
    return run_pretraining(cfg, out_dir, **kwargs)


def read_log(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / LOG_FILE
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
