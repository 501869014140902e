"""Image ingestion, synthetic datasets and the paired-view augmentation pipeline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, IngestionError

MIN_SIDE = 16
SUPPORTED_SUFFIXES = (".png", ".ppm")
LABELS_FILE = "labels.tsv"
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    label: int | None = None
    name: str | None = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[0] != 3:
            raise ConfigurationError(f"image pixels must have shape (3, H, W), got {px.shape}")
        if px.shape[1] < MIN_SIDE or px.shape[2] < MIN_SIDE:
            raise ConfigurationError(f"image sides must be >= {MIN_SIDE}, got {px.shape[1:]}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ConfigurationError("image pixels must be finite and within [0, 1]")
        if self.label is not None and self.label < 0:
            raise ConfigurationError(f"labels must be non-negative, got {self.label}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class AugConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.1
    solarize_threshold: float = 0.5
    hflip_prob: float = 0.5
    output_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(float(v) for v in self.crop_scale_range))
        object.__setattr__(self, "blur_sigma_range", tuple(float(v) for v in self.blur_sigma_range))
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "solarize_prob", "hflip_prob", "solarize_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.jitter_strength < 0:
            raise ConfigurationError("jitter_strength must be non-negative")
        s_lo, s_hi = self.blur_sigma_range
        if not (0.0 < s_lo <= s_hi):
            raise ConfigurationError(f"blur_sigma_range must satisfy 0 < min <= max, got {self.blur_sigma_range}")
        if self.output_size < MIN_SIDE:
            raise ConfigurationError(f"output_size must be >= {MIN_SIDE}")

    @classmethod
    def identity(cls, output_size: int = 32) -> "AugConfig":
        return cls(
            crop_scale_range=(1.0, 1.0),
            jitter_prob=0.0,
            grayscale_prob=0.0,
            blur_prob=0.0,
            solarize_prob=0.0,
            hflip_prob=0.0,
            output_size=output_size,
        )


@dataclass(frozen=True, eq=False)
class ViewPair:
    view_a: Image
    view_b: Image
    seed_a: int
    seed_b: int


# --------------------------------------------------------------------------- I/O


def _read_image(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise IngestionError(f"cannot read image '{path.name}': {exc}") from exc
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise IngestionError(
            f"image '{path.name}' is {arr.shape[1]}x{arr.shape[0]}, below the {MIN_SIDE}px minimum"
        )
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _read_labels(directory: Path) -> dict[str, int]:
    path = directory / LABELS_FILE
    if not path.exists():
        return {}
    labels = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, value = line.split("\t")
            labels[name] = int(value)
        except ValueError as exc:
            raise IngestionError(f"{LABELS_FILE} line {lineno} is not 'filename<TAB>integer'") from exc
    return labels


def load_dataset(path: str | Path) -> list[Image]:
    """Load every PNG / binary PPM in ``path`` in lexicographic filename order."""
    directory = Path(path)
    if not directory.is_dir():
        raise ConfigurationError(f"dataset directory '{directory}' does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    if not files:
        raise ConfigurationError(f"dataset directory '{directory}' contains no PNG or PPM images")
    labels = _read_labels(directory)
    return [Image(_read_image(p), labels.get(p.name), p.name) for p in files]


def load_image(path: str | Path, label: int | None = None) -> Image:
    path = Path(path)
    return Image(_read_image(path), label, path.name)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write (3, H, W) pixels as binary PPM (or PNG when the suffix says so)."""
    path = Path(path)
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    PILImage.fromarray(to_uint8(pixels).transpose(1, 2, 0), mode="RGB").save(path, format=fmt)


def save_dataset(images: Sequence[Image], path: str | Path) -> list[str]:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(images) - 1)))
    names = []
    rows = []
    for i, image in enumerate(images):
        name = f"img_{i:0{width}d}.ppm"
        save_image(image.pixels, directory / name)
        names.append(name)
        if image.label is not None:
            rows.append(f"{name}\t{image.label}\n")
    if rows:
        (directory / LABELS_FILE).write_text("".join(rows), encoding="utf-8")
    return names


# --------------------------------------------------------------------------- synthetic data

# Per-class shape and hue centre; classes beyond the table cycle shapes and
# spread hues evenly.
_SHAPES = ("disc", "square", "triangle", "ring", "cross", "diamond")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i], dtype=np.float32)


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if shape == "triangle":
        # upward triangle in the rotated frame
        return (v <= r * 0.6) & (v >= -r) & (np.abs(u) <= (v + r) * 0.65)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= r
    raise ValueError(shape)


def _synthetic_image(rng: np.random.Generator, label: int, classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    # textured background: low-saturation base colour modulated by two gratings
    base = _hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.2), rng.uniform(0.35, 0.65))
    texture = np.zeros((size, size), dtype=np.float32)
    for _ in range(2):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(1.0, 4.0) * 2 * math.pi / size
        phase = rng.uniform(0, 2 * math.pi)
        texture += 0.5 * np.sin(freq * (math.cos(theta) * xx + math.sin(theta) * yy) + phase)
    img = base[:, None, None] * (1.0 + 0.25 * texture)[None]
    img = img + rng.normal(0.0, 0.03, size=(3, size, size)).astype(np.float32)

    shape = _SHAPES[label % len(_SHAPES)]
    hue_centre = label / classes
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(0.18, 0.3) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(-0.3, 0.3))
        hue = (hue_centre + rng.uniform(-0.04, 0.04)) % 1.0
        colour = _hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0))
        img = np.where(mask[None], colour[:, None, None], img)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(seed: int, count: int, classes: int, size: int = 32) -> list[Image]:
    """Deterministic labelled images: textured background plus 1-3 class-coded blobs.

    The class fixes both the blob shape and its hue family.  Labels are
    balanced to within one image per class.  Pixels are quantized to 8 bits so
    a PPM round trip is lossless.
    """
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if classes > count:
        raise ConfigurationError(f"cannot spread {count} images over {classes} classes")
    if size < MIN_SIDE:
        raise ConfigurationError(f"size must be >= {MIN_SIDE}, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes)
    images = []
    for i, label in enumerate(labels):
        pixels = to_uint8(_synthetic_image(rng, int(label), classes, size)).astype(np.float32) / 255.0
        images.append(Image(pixels, int(label), f"img_{i:05d}.ppm"))
    return images


# --------------------------------------------------------------------------- transforms


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with half-pixel centres."""
    pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize; equal sizes give an exact copy."""
    _, h, w = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels.copy()
    ry = _interp_matrix(h, out_h).astype(pixels.dtype)
    rx = _interp_matrix(w, out_w).astype(pixels.dtype)
    return ry @ pixels @ rx.T


def sample_crop(rng: np.random.Generator, h: int, w: int, scale: tuple[float, float],
                ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random resized crop, with the usual fallback."""
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def grayscale(pixels: np.ndarray) -> np.ndarray:
    gray = np.tensordot(_LUMA.astype(pixels.dtype), pixels, axes=(0, 0))
    return np.repeat(gray[None], 3, axis=0)


def _hue_matrix(angle: float) -> np.ndarray:
    k = np.full(3, 1 / math.sqrt(3))
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return math.cos(angle) * np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * np.outer(k, k)


def hue_rotate(pixels: np.ndarray, angle: float) -> np.ndarray:
    """Rotate colours about the grey axis by ``angle`` radians."""
    return np.tensordot(_hue_matrix(angle).astype(pixels.dtype), pixels, axes=(1, 0))


def color_jitter(pixels: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    """Brightness, contrast, saturation then hue, folded into one affine colour map.

    Each step is affine in RGB, so the composition is a 3x3 matrix plus an
    offset; the result is clipped once at the end.
    """
    mean = brightness * float(np.tensordot(_LUMA, pixels, axes=(0, 0)).mean())
    to_gray = np.outer(np.ones(3), _LUMA)
    sat = saturation * np.eye(3) + (1 - saturation) * to_gray
    mat = _hue_matrix(hue) @ sat
    linear = (contrast * brightness) * mat
    offset = (1 - contrast) * mean * mat.sum(axis=1)
    x = np.tensordot(linear.astype(pixels.dtype), pixels, axes=(1, 0)) + offset.astype(pixels.dtype)[:, None, None]
    return np.clip(x, 0, 1)


def _blur_matrix(n: int, sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    cols = np.arange(n)[:, None] + offsets[None, :]
    cols = np.abs(cols)
    cols = np.where(cols > n - 1, 2 * (n - 1) - cols, cols)
    m = np.zeros((n, n))
    np.add.at(m, (np.repeat(np.arange(n), offsets.size), cols.ravel()), np.tile(kernel, n))
    return m


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur, kernel radius ceil(2*sigma), reflected borders."""
    _, h, w = pixels.shape
    radius = min(int(math.ceil(2 * sigma)), h - 1, w - 1)
    if radius < 1:
        return pixels.copy()
    by = _blur_matrix(h, sigma, radius).astype(pixels.dtype)
    bx = by if w == h else _blur_matrix(w, sigma, radius).astype(pixels.dtype)
    return by @ pixels @ bx.T


def solarize(pixels: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(pixels >= threshold, 1.0 - pixels, pixels).astype(pixels.dtype)


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, ::-1].copy()


def augment_view(pixels: np.ndarray, cfg: AugConfig, seed: int) -> np.ndarray:
    """One augmentation draw: crop -> jitter -> grayscale -> blur -> solarize -> flip."""
    rng = np.random.default_rng(seed)
    _, h, w = pixels.shape
    top, left, ch, cw = sample_crop(rng, h, w, cfg.crop_scale_range)
    x = resize_bilinear(pixels[:, top : top + ch, left : left + cw], cfg.output_size, cfg.output_size)
    if rng.random() < cfg.jitter_prob:
        s = cfg.jitter_strength
        b, c, sat = rng.uniform(1 - s, 1 + s, size=3)
        angle = rng.uniform(-s * math.pi / 8, s * math.pi / 8)
        x = color_jitter(x, max(b, 0.0), max(c, 0.0), max(sat, 0.0), angle)
    if rng.random() < cfg.grayscale_prob:
        x = grayscale(x)
    if rng.random() < cfg.blur_prob:
        x = gaussian_blur(x, rng.uniform(*cfg.blur_sigma_range))
    if rng.random() < cfg.solarize_prob:
        x = solarize(x, cfg.solarize_threshold)
    if rng.random() < cfg.hflip_prob:
        x = hflip(x)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def view_seeds(rng_state: int) -> tuple[int, int]:
    children = np.random.SeedSequence(rng_state).spawn(2)
    return tuple(int(c.generate_state(1, np.uint64)[0]) for c in children)


def augment_pair(image: Image, cfg: AugConfig, rng_state: int) -> ViewPair:
    seed_a, seed_b = view_seeds(rng_state)
    view_a = Image(augment_view(image.pixels, cfg, seed_a), image.label, image.name)
    view_b = Image(augment_view(image.pixels, cfg, seed_b), image.label, image.name)
    return ViewPair(view_a, view_b, seed_a, seed_b)


def center_resize(image: Image, size: int) -> np.ndarray:
    return resize_bilinear(image.pixels, size, size).astype(np.float32)


def stack_pixels(images: Iterable[Image]) -> np.ndarray:
    return np.stack([im.pixels for im in images]).astype(np.float32)
