"""Backbone, projectors, predictor, EMA target and frozen teacher."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import nn
from .data import Image
from .errors import ConfigurationError, DimensionError, UsageError
from .nn import BatchNorm, Conv2d, GlobalAvgPool, Linear, ParamSet, ReLU, Regions

PREDICTOR_PREFIX = "predictor."
BACKBONE_PREFIX = "backbone."


@dataclass(frozen=True)
class EncoderSpec:
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2), (128, 1))
    input_size: int = 32
    hidden_dim: int = 256
    global_dim: int = 64
    local_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        stride = int(np.prod([s for _, s in self.stages]))
        if self.input_size % stride:
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible by the total stride {stride}"
            )
        h, w = self.grid()
        if h * w < 4:
            raise ConfigurationError(f"region grid {h}x{w} has fewer than 4 regions")

    @property
    def feature_channels(self) -> int:
        return self.stages[-1][0]

    def grid(self, input_size: int | None = None) -> tuple[int, int]:
        n = self.input_size if input_size is None else input_size
        for _, stride in self.stages:
            n = (n - 1) // stride + 1
        return n, n

    @property
    def n_regions(self) -> int:
        h, w = self.grid()
        return h * w

    def backbone_layers(self) -> list:
        layers, cin = [], 3
        for i, (channels, stride) in enumerate(self.stages, 1):
            layers += [
                Conv2d(f"backbone.stage{i}.conv", cin, channels, 3, stride, 1),
                BatchNorm(f"backbone.stage{i}.bn", channels),
                ReLU(),
            ]
            cin = channels
        return layers

    def _mlp(self, prefix: str, d_in: int, d_out: int) -> list:
        return [
            Linear(f"{prefix}.fc1", d_in, self.hidden_dim),
            BatchNorm(f"{prefix}.bn1", self.hidden_dim),
            ReLU(),
            Linear(f"{prefix}.fc2", self.hidden_dim, d_out),
        ]

    def global_projector_layers(self) -> list:
        return [GlobalAvgPool()] + self._mlp("global_projector", self.feature_channels, self.global_dim)

    def local_projector_layers(self) -> list:
        # per-cell MLP == 1x1 receptive field over the final map
        return [Regions()] + self._mlp("local_projector", self.feature_channels, self.local_dim)

    def predictor_layers(self) -> list:
        return self._mlp("predictor", self.global_dim, self.global_dim)

    def all_layers(self) -> list:
        return (
            self.backbone_layers()
            + self.global_projector_layers()
            + self.local_projector_layers()
            + self.predictor_layers()
        )

    def to_dict(self) -> dict:
        return {
            "stages": [list(s) for s in self.stages],
            "input_size": self.input_size,
            "hidden_dim": self.hidden_dim,
            "global_dim": self.global_dim,
            "local_dim": self.local_dim,
        }


def _without_predictor(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items() if not k.startswith(PREDICTOR_PREFIX)}


def backbone_only(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items() if k.startswith(BACKBONE_PREFIX)}


@dataclass
class ModelState:
    spec: EncoderSpec
    online: ParamSet
    online_stats: ParamSet
    target: ParamSet
    target_stats: ParamSet
    teacher: ParamSet | None = None
    teacher_stats: ParamSet | None = None
    velocity: ParamSet = field(default_factory=dict)
    tau: float = 0.99
    step: int = 0
    epoch: int = 0

    def copy(self) -> "ModelState":
        def dup(d):
            return None if d is None else {k: v.copy() for k, v in d.items()}

        return ModelState(
            self.spec, dup(self.online), dup(self.online_stats), dup(self.target), dup(self.target_stats),
            dup(self.teacher), dup(self.teacher_stats), dup(self.velocity), self.tau, self.step, self.epoch,
        )


def init_model_state(spec: EncoderSpec, seed: int, tau: float = 0.99, dtype=np.float32) -> ModelState:
    rng = np.random.default_rng(seed)
    layers = spec.all_layers()
    online = nn.init_params(layers, rng, dtype)
    stats = nn.init_stats(layers, dtype)
    target_stats = {k: v.copy() for k, v in stats.items() if not k.startswith(PREDICTOR_PREFIX)}
    return ModelState(spec, online, stats, _without_predictor(online), target_stats, tau=tau)


def attach_teacher(state: ModelState, params: ParamSet, stats: ParamSet) -> ModelState:
    """Install a frozen teacher backbone taken from another run's online network."""
    teacher = backbone_only(params)
    expected = set(nn.param_shapes(state.spec.backbone_layers()))
    if set(teacher) != expected:
        raise ConfigurationError("teacher checkpoint does not provide the configured backbone")
    for key, value in teacher.items():
        value.setflags(write=False)
    teacher_stats = {k: v.copy() for k, v in stats.items() if k.startswith(BACKBONE_PREFIX)}
    for value in teacher_stats.values():
        value.setflags(write=False)
    state.teacher, state.teacher_stats = teacher, teacher_stats
    return state


# --------------------------------------------------------------------------- single-call API


def _as_batch(pixels) -> tuple[np.ndarray, bool]:
    if isinstance(pixels, Image):
        pixels = pixels.pixels
    x = np.asarray(pixels)
    if x.ndim == 3:
        return x[None], True
    return x, False


def encode(params: ParamSet, view, spec: EncoderSpec, stats: ParamSet | None = None,
           training: bool = False) -> np.ndarray:
    """Final backbone feature map: (C_f, H_f, W_f) for one view, batched otherwise.

    Eval mode (the default) needs ``stats``; in training mode batch statistics
    are used and ``stats`` (if given) receives the running-average update.
    """
    x, single = _as_batch(view)
    if x.shape[-2:] != (spec.input_size, spec.input_size):
        raise DimensionError(f"view of size {x.shape[-2:]} does not match input size {spec.input_size}")
    fmap, _ = nn.forward_layers(params, x, spec.backbone_layers(), training=training, stats=stats)
    return fmap[0] if single else fmap


def project_global(params: ParamSet, feature_map: np.ndarray, spec: EncoderSpec,
                   stats: ParamSet | None = None, training: bool = False) -> np.ndarray:
    single = feature_map.ndim == 3
    fmap = feature_map[None] if single else feature_map
    out, _ = nn.forward_layers(params, fmap, spec.global_projector_layers(), training=training, stats=stats)
    return out[0] if single else out


def project_local(params: ParamSet, feature_map: np.ndarray, spec: EncoderSpec,
                  stats: ParamSet | None = None, training: bool = False) -> np.ndarray:
    """Region features (n, D_l), rows in row-major grid order; batched (N, n, D_l)."""
    single = feature_map.ndim == 3
    fmap = feature_map[None] if single else feature_map
    n, _, h, w = fmap.shape
    out, _ = nn.forward_layers(params, fmap, spec.local_projector_layers(), training=training, stats=stats)
    out = out.reshape(n, h * w, -1)
    return out[0] if single else out


def predict(params: ParamSet, g: np.ndarray, spec: EncoderSpec,
            stats: ParamSet | None = None, training: bool = False) -> np.ndarray:
    if not any(k.startswith(PREDICTOR_PREFIX) for k in params):
        raise UsageError("the predictor exists only on the online branch")
    single = g.ndim == 1
    out, _ = nn.forward_layers(params, g[None] if single else g, spec.predictor_layers(),
                               training=training, stats=stats)
    return out[0] if single else out


def teacher_regions(state: ModelState, view) -> np.ndarray:
    """L2-normalized raw final-map cell vectors of the frozen teacher, (n, C_f)."""
    if state.teacher is None:
        raise ConfigurationError("no teacher loaded")
    x, single = _as_batch(view)
    fmap, _ = nn.forward_layers(state.teacher, x, state.spec.backbone_layers(),
                                training=False, stats=state.teacher_stats)
    n, c, h, w = fmap.shape
    rows = nn.l2_normalize(fmap.transpose(0, 2, 3, 1).reshape(n, h * w, c))
    return rows[0] if single else rows


# --------------------------------------------------------------------------- training passes


@dataclass
class OnlinePass:
    feature_map: np.ndarray
    projection: np.ndarray      # (N, D_g)
    prediction: np.ndarray      # (N, D_g)
    local: np.ndarray           # (N, n, D_l)
    tapes: dict[str, Any]


def online_forward(state: ModelState, x: np.ndarray, stats: ParamSet, training: bool = True) -> OnlinePass:
    spec, params = state.spec, state.online
    fmap, t_bb = nn.forward_layers(params, x, spec.backbone_layers(), training=training, stats=stats)
    z, t_gp = nn.forward_layers(params, fmap, spec.global_projector_layers(), training=training, stats=stats)
    p, t_pr = nn.forward_layers(params, z, spec.predictor_layers(), training=training, stats=stats)
    n, _, h, w = fmap.shape
    loc, t_lp = nn.forward_layers(params, fmap, spec.local_projector_layers(), training=training, stats=stats)
    tapes = {"backbone": t_bb, "global": t_gp, "predictor": t_pr, "local": t_lp}
    return OnlinePass(fmap, z, p, loc.reshape(n, h * w, -1), tapes)


def online_backward(out: OnlinePass, d_prediction: np.ndarray, d_local: np.ndarray,
                    d_projection: np.ndarray | None = None) -> nn.GradSet:
    """Chain the tapes of :func:`online_forward`; returns gradients for every online key."""
    grads: nn.GradSet = {}
    g_pr, d_z = nn.backward(out.tapes["predictor"], d_prediction)
    if d_projection is not None:
        d_z = d_z + d_projection
    g_gp, d_fmap = nn.backward(out.tapes["global"], d_z)
    g_lp, d_fmap_local = nn.backward(out.tapes["local"], d_local.reshape(-1, d_local.shape[-1]))
    g_bb, _ = nn.backward(out.tapes["backbone"], d_fmap + d_fmap_local, input_grad=False)
    for part in (g_bb, g_gp, g_lp, g_pr):
        grads.update(part)
    return dict(sorted(grads.items()))


def target_forward(state: ModelState, x: np.ndarray, training: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Target projections (N, D_g) and region features (N, n, D_l); no tape, no stat updates."""
    spec, params, stats = state.spec, state.target, state.target_stats
    fmap, _ = nn.forward_layers(params, x, spec.backbone_layers(), training=training,
                                stats=stats, update_stats=False)
    z, _ = nn.forward_layers(params, fmap, spec.global_projector_layers(), training=training,
                             stats=stats, update_stats=False)
    n, _, h, w = fmap.shape
    loc, _ = nn.forward_layers(params, fmap, spec.local_projector_layers(), training=training,
                               stats=stats, update_stats=False)
    return z, loc.reshape(n, h * w, -1)
