"""Dense numpy layers with a hand-written reverse pass, optimizers and EMA.

Tensors are plain ``numpy.ndarray`` values (float32 for training, float64 for
gradient checks).  Image-like tensors are NCHW at the API boundary and
channels-last inside a layer stack.  A ``ParamSet`` is a ``dict`` mapping dotted parameter names
to arrays, always built in sorted-key order.  Layer stacks are described by a
list of small frozen dataclasses and evaluated with :func:`forward_layers`,
which returns a :class:`Tape` that :func:`backward` consumes exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericError, StructuralError, UsageError

EPS = 1e-8

ParamSet = dict[str, np.ndarray]
GradSet = dict[str, np.ndarray]


# --------------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    """Normalizes over the batch (and spatial axes for 4-d inputs)."""

    name: str
    num_features: int
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel_size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Regions:
    """Reshape (N, C, H, W) into (N*H*W, C), cells in row-major order per image."""


Layer = Union[Conv2d, BatchNorm, ReLU, MaxPool2d, GlobalAvgPool, Linear, Regions]


def _nchw(shape: tuple[int, ...]) -> tuple[int, ...]:
    return (shape[0], shape[3], shape[1], shape[2]) if len(shape) == 4 else shape


def _layer_label(layer: Layer, index: int) -> str:
    name = getattr(layer, "name", None)
    return f"{type(layer).__name__}[{index}]" + (f" '{name}'" if name else "")


def param_shapes(layers: Sequence[Layer]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in layers:
        if isinstance(layer, Conv2d):
            k = layer.kernel_size
            shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, k, k)
            if layer.bias:
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        elif isinstance(layer, Linear):
            shapes[f"{layer.name}.weight"] = (layer.out_features, layer.in_features)
            if layer.bias:
                shapes[f"{layer.name}.bias"] = (layer.out_features,)
        elif isinstance(layer, BatchNorm):
            shapes[f"{layer.name}.weight"] = (layer.num_features,)
            shapes[f"{layer.name}.bias"] = (layer.num_features,)
    return dict(sorted(shapes.items()))


def init_params(layers: Sequence[Layer], rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Kaiming-uniform (fan-in) weights, zero biases, BN scale 1 and shift 0."""
    params: ParamSet = {}
    for layer in layers:
        if isinstance(layer, (Conv2d, Linear)):
            shape = param_shapes([layer])[f"{layer.name}.weight"]
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            if layer.bias:
                params[f"{layer.name}.bias"] = np.zeros(shape[0], dtype=dtype)
        elif isinstance(layer, BatchNorm):
            params[f"{layer.name}.weight"] = np.ones(layer.num_features, dtype=dtype)
            params[f"{layer.name}.bias"] = np.zeros(layer.num_features, dtype=dtype)
    return dict(sorted(params.items()))


def init_stats(layers: Sequence[Layer], dtype=np.float32) -> ParamSet:
    """Running statistics for every BatchNorm layer (mean 0, variance 1)."""
    stats: ParamSet = {}
    for layer in layers:
        if isinstance(layer, BatchNorm):
            stats[f"{layer.name}.running_mean"] = np.zeros(layer.num_features, dtype=dtype)
            stats[f"{layer.name}.running_var"] = np.ones(layer.num_features, dtype=dtype)
    return dict(sorted(stats.items()))


# --------------------------------------------------------------------------- forward


@dataclass
class Tape:
    """Activation record of one forward pass; consumed by a single backward."""

    layers: list[Layer]
    caches: list[Any]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    param_keys: list[str]
    dtype: np.dtype
    params: ParamSet
    consumed: bool = field(default=False)


def _conv_cols(x: np.ndarray, k: int, stride: int, padding: int):
    """im2col for a channels-last input; columns ordered (kh, kw, C)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, hp, wp, c = x.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        return None, x.shape, ho, wo
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, k * k * c), x.shape, ho, wo


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 1, 2)
    raise DimensionError(f"batch norm expects 2-d or 4-d input, got shape {x.shape}")


def _forward_one(layer: Layer, x: np.ndarray, params: ParamSet, stats, training: bool, update_stats: bool):
    if isinstance(layer, Conv2d):
        w = params[f"{layer.name}.weight"]
        if x.ndim != 4 or x.shape[3] != layer.in_channels:
            raise DimensionError(
                f"conv '{layer.name}' expects {layer.in_channels} input channels, got shape {_nchw(x.shape)}"
            )
        cols, padded_shape, ho, wo = _conv_cols(x, layer.kernel_size, layer.stride, layer.padding)
        if cols is None:
            raise DimensionError(f"conv '{layer.name}' input {_nchw(x.shape)} too small for its kernel")
        wmat = w.transpose(0, 2, 3, 1).reshape(layer.out_channels, -1)
        out = cols @ wmat.T
        if layer.bias:
            out += params[f"{layer.name}.bias"]
        return out.reshape(x.shape[0], ho, wo, layer.out_channels), (cols, wmat, padded_shape, ho, wo)

    if isinstance(layer, Linear):
        if x.ndim != 2 or x.shape[1] != layer.in_features:
            raise DimensionError(
                f"linear '{layer.name}' expects (N, {layer.in_features}), got {x.shape}"
            )
        out = x @ params[f"{layer.name}.weight"].T
        if layer.bias:
            out = out + params[f"{layer.name}.bias"]
        return out, x

    if isinstance(layer, BatchNorm):
        axes = _bn_axes(x)
        if x.shape[-1] != layer.num_features:
            raise DimensionError(
                f"batch norm '{layer.name}' expects {layer.num_features} features, got {x.shape[-1]}"
            )
        gamma = params[f"{layer.name}.weight"]
        beta = params[f"{layer.name}.bias"]
        flat = x.reshape(-1, x.shape[-1])
        if training:
            mean = flat.mean(axis=0)
            var = ((flat - mean) ** 2).mean(axis=0)
            if stats is not None and update_stats:
                count = flat.shape[0]
                unbiased = var * (count / (count - 1)) if count > 1 else var
                m = layer.momentum
                rm, rv = f"{layer.name}.running_mean", f"{layer.name}.running_var"
                stats[rm] = (m * stats[rm] + (1 - m) * mean).astype(stats[rm].dtype)
                stats[rv] = (m * stats[rv] + (1 - m) * unbiased).astype(stats[rv].dtype)
        else:
            if stats is None:
                raise UsageError(f"batch norm '{layer.name}' in eval mode needs running statistics")
            mean = stats[f"{layer.name}.running_mean"].astype(x.dtype)
            var = stats[f"{layer.name}.running_var"].astype(x.dtype)
        inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype)
        xhat = (x - mean) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, training)

    if isinstance(layer, ReLU):
        mask = x > 0
        return x * mask, mask

    if isinstance(layer, MaxPool2d):
        if x.ndim != 4:
            raise DimensionError(f"max pool expects 4-d input, got {x.shape}")
        k, s = layer.kernel_size, layer.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo, c = win.shape[:4]
        if ho < 1 or wo < 1:
            raise DimensionError(f"max pool input {_nchw(x.shape)} smaller than its window")
        flat = win.reshape(n, ho, wo, c, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape, ho, wo)

    if isinstance(layer, GlobalAvgPool):
        if x.ndim != 4:
            raise DimensionError(f"global average pool expects 4-d input, got {x.shape}")
        return x.mean(axis=(1, 2)), x.shape

    if isinstance(layer, Regions):
        if x.ndim != 4:
            raise DimensionError(f"region flattening expects 4-d input, got {x.shape}")
        n, h, w, c = x.shape
        return x.reshape(n * h * w, c), x.shape

    raise UsageError(f"unknown layer type {type(layer).__name__}")


def forward_layers(
    params: ParamSet,
    x: np.ndarray,
    layers: Sequence[Layer],
    *,
    training: bool = False,
    stats: ParamSet | None = None,
    update_stats: bool = True,
) -> tuple[np.ndarray, Tape]:
    """Evaluate ``layers`` on ``x``.

    In training mode batch norm uses batch statistics and, when ``stats`` is
    given and ``update_stats`` is true, folds them into ``stats`` in place.
    In eval mode the running statistics in ``stats`` are used.
    """
    keys = sorted(param_shapes(layers))
    missing = [k for k in keys if k not in params]
    if missing:
        raise StructuralError(f"missing parameters: {', '.join(missing)}")
    dtype = params[keys[0]].dtype if keys else np.asarray(x).dtype
    x = np.asarray(x, dtype=dtype)
    input_shape = x.shape
    if x.ndim == 4:
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    caches = []
    for index, layer in enumerate(layers):
        try:
            x, cache = _forward_one(layer, x, params, stats, training, update_stats)
        except DimensionError as exc:
            raise DimensionError(f"{_layer_label(layer, index)}: {exc}") from None
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation after {_layer_label(layer, index)}")
        caches.append(cache)
    if x.ndim == 4:
        x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    tape = Tape(list(layers), caches, input_shape, x.shape, keys, np.dtype(dtype), params)
    return x, tape


# --------------------------------------------------------------------------- backward


def _backward_one(layer: Layer, cache, g: np.ndarray, params: ParamSet, grads: GradSet,
                  need_dx: bool = True) -> np.ndarray | None:
    if isinstance(layer, Conv2d):
        cols, wmat, padded_shape, ho, wo = cache
        w = params[f"{layer.name}.weight"]
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        g2 = g.reshape(-1, layer.out_channels)
        dw = (g2.T @ cols).reshape(layer.out_channels, k, k, layer.in_channels)
        grads[f"{layer.name}.weight"] = np.ascontiguousarray(dw.transpose(0, 3, 1, 2))
        if layer.bias:
            grads[f"{layer.name}.bias"] = g2.sum(axis=0)
        if not need_dx:
            return None
        n = padded_shape[0]
        dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, layer.in_channels)
        dx = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        if p:
            dx = dx[:, p:-p, p:-p, :]
        return dx

    if isinstance(layer, Linear):
        x = cache
        w = params[f"{layer.name}.weight"]
        grads[f"{layer.name}.weight"] = g.T @ x
        if layer.bias:
            grads[f"{layer.name}.bias"] = g.sum(axis=0)
        return g @ w if need_dx else None

    if isinstance(layer, BatchNorm):
        xhat, inv_std, training = cache
        gamma = params[f"{layer.name}.weight"]
        c = xhat.shape[-1]
        g_flat, xhat_flat = g.reshape(-1, c), xhat.reshape(-1, c)
        sum_g = g_flat.sum(axis=0)
        sum_gx = (g_flat * xhat_flat).sum(axis=0)
        grads[f"{layer.name}.weight"] = sum_gx
        grads[f"{layer.name}.bias"] = sum_g
        if not training:
            return g * (gamma * inv_std)
        count = g_flat.shape[0]
        scale = gamma * inv_std / count
        return scale * (count * g - sum_g - xhat * sum_gx)

    if isinstance(layer, ReLU):
        return g * cache

    if isinstance(layer, MaxPool2d):
        arg, x_shape, ho, wo = cache
        k, s = layer.kernel_size, layer.stride
        dx = np.zeros(x_shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, i : i + s * ho : s, j : j + s * wo : s, :] += g * (arg == idx)
        return dx

    if isinstance(layer, GlobalAvgPool):
        shape = cache
        scale = 1.0 / (shape[1] * shape[2])
        return np.broadcast_to((g * scale)[:, None, None, :], shape).copy()

    if isinstance(layer, Regions):
        return g.reshape(cache)

    raise UsageError(f"unknown layer type {type(layer).__name__}")


def backward(tape: Tape, upstream: np.ndarray, *, input_grad: bool = True) -> tuple[GradSet, np.ndarray | None]:
    """Reverse pass of ``tape`` for the upstream gradient of its output.

    Returns ``(grads, grad_input)``.  ``grads`` carries exactly the parameter
    keys the taped layers use; ``grad_input`` is ``None`` when ``input_grad``
    is false.  The tape is consumed.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    upstream = np.asarray(upstream, dtype=tape.dtype)
    if upstream.shape != tape.output_shape:
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} != forward output shape {tape.output_shape}"
        )
    tape.consumed = True
    grads: GradSet = {}
    g = upstream
    if g.ndim == 4:
        g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
    last = len(tape.layers) - 1
    for pos, (layer, cache) in enumerate(zip(reversed(tape.layers), reversed(tape.caches))):
        g = _backward_one(layer, cache, g, tape.params, grads, need_dx=input_grad or pos < last)
    tape.caches = []
    if g is None:
        return dict(sorted(grads.items())), None
    if g.ndim == 4:
        g = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
    return dict(sorted(grads.items())), g


# --------------------------------------------------------------------------- cosine


def cosine_similarity(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine similarity of vectors with lengths {a.size} and {b.size}")
    return float(a @ b / (max(np.linalg.norm(a), eps) * max(np.linalg.norm(b), eps)))


def cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Cosine of matching rows along the last axis, epsilon-guarded norms."""
    if a.shape != b.shape:
        raise DimensionError(f"row cosine of shapes {a.shape} and {b.shape}")
    na = np.maximum(np.sqrt((a * a).sum(-1)), eps)
    nb = np.maximum(np.sqrt((b * b).sum(-1)), eps)
    return (a * b).sum(-1) / (na * nb)


def cosine_rows_backward(a: np.ndarray, b: np.ndarray, upstream: np.ndarray, eps: float = EPS):
    """Gradients of ``sum(upstream * cosine_rows(a, b))`` w.r.t. ``a`` and ``b``.

    Where a norm sits at the epsilon floor it is a constant, so only the
    numerator contributes.
    """
    ra = np.sqrt((a * a).sum(-1))
    rb = np.sqrt((b * b).sum(-1))
    na = np.maximum(ra, eps)[..., None]
    nb = np.maximum(rb, eps)[..., None]
    cos = ((a * b).sum(-1, keepdims=True)) / (na * nb)
    u = np.asarray(upstream)[..., None]
    da = u * (b / (na * nb) - np.where((ra > eps)[..., None], cos * a / (na * na), 0.0))
    db = u * (a / (na * nb) - np.where((rb > eps)[..., None], cos * b / (nb * nb), 0.0))
    return da.astype(a.dtype, copy=False), db.astype(b.dtype, copy=False)


def l2_normalize(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


# --------------------------------------------------------------------------- optimizers


def _check_aligned(params: ParamSet, grads: GradSet) -> None:
    if params.keys() != grads.keys():
        extra = sorted(set(grads) ^ set(params))
        raise StructuralError(f"parameter and gradient keys differ: {', '.join(extra)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, expected {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")


def sgd_momentum_step(
    params: ParamSet,
    grads: GradSet,
    state: ParamSet,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[ParamSet, ParamSet]:
    """v <- momentum*v + g + wd*w ; w <- w - lr*v.  Returns new (params, velocity)."""
    _check_aligned(params, grads)
    new_params, new_state = {}, {}
    for name in sorted(params):
        w = params[name]
        v = state.get(name)
        d = grads[name] + weight_decay * w
        v = d if v is None else momentum * v + d
        new_state[name] = v.astype(w.dtype, copy=False)
        new_params[name] = (w - lr * v).astype(w.dtype, copy=False)
    return new_params, new_state


def lars_scale_step(
    params: ParamSet,
    grads: GradSet,
    state: ParamSet,
    base_lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    trust_coeff: float = 0.001,
    eps: float = EPS,
) -> tuple[ParamSet, ParamSet]:
    """Momentum SGD with a per-tensor trust ratio.

    local_lr = trust * |w| / (|g + wd*w| + eps), or 1 when |w| == 0.  The scaled
    update enters the momentum buffer and the step uses ``base_lr``.
    """
    _check_aligned(params, grads)
    new_params, new_state = {}, {}
    for name in sorted(params):
        w = params[name]
        d = grads[name] + weight_decay * w
        w_norm = float(np.linalg.norm(w))
        local_lr = trust_coeff * w_norm / (float(np.linalg.norm(d)) + eps) if w_norm > 0 else 1.0
        d = d * local_lr
        v = state.get(name)
        v = d if v is None else momentum * v + d
        new_state[name] = v.astype(w.dtype, copy=False)
        new_params[name] = (w - base_lr * v).astype(w.dtype, copy=False)
    return new_params, new_state


# --------------------------------------------------------------------------- EMA


def ema_update(
    online: ParamSet,
    target: ParamSet,
    tau: float,
    online_stats: ParamSet | None = None,
) -> tuple[ParamSet, ParamSet | None]:
    """target <- tau*target + (1-tau)*online; BN running stats copied from online."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    if online.keys() != target.keys():
        diff = sorted(set(online) ^ set(target))
        raise StructuralError(f"online and target keys differ: {', '.join(diff)}")
    new_target = {}
    for name in sorted(target):
        t, o = target[name], online[name]
        if t.shape != o.shape:
            raise StructuralError(f"shape mismatch for '{name}': {t.shape} vs {o.shape}")
        new_target[name] = (tau * t + (1.0 - tau) * o).astype(t.dtype, copy=False)
    stats = None if online_stats is None else {k: v.copy() for k, v in sorted(online_stats.items())}
    return new_target, stats
