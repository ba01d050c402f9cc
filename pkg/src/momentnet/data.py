"""Datasets: procedural shape images, CIFAR-10 binary records, and the
evaluation-time distortion / train-time augmentation harnesses.

The synthetic generator is built so that the shape class is the only signal
correlated with the label: foreground/background textures, colors, pose and
noise are drawn independently of it.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError, GenerationError

SHAPE_CLASSES = ("disk", "rectangle", "triangle", "cross", "annulus")
TEXTURE_KINDS = ("flat", "stripes", "noise")

_SUPERSAMPLE = 4
_MIN_CONTRAST = 0.25  # luminance gap between fg and bg mean colors


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    specs: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class TextureSpec:
    kind: str
    color_a: np.ndarray
    color_b: np.ndarray
    angle: float = 0.0
    freq: float = 3.0
    phase: float = 0.0


@dataclass
class ShapeSpec:
    shape_class: str
    fg: TextureSpec
    bg: TextureSpec
    rotation_deg: float
    scale: float
    tx: float
    ty: float
    noise_sigma: float


@dataclass
class DistortionSpec:
    kind: str  # "R" or "RST"
    rotation_range: float = 90.0
    scale_range: tuple[float, float] = (0.7, 1.2)
    translation_range: float = 0.2

    def __post_init__(self):
        if self.kind not in ("R", "RST"):
            raise ContractViolation(f"distortion kind must be R or RST, got '{self.kind}'")


@dataclass
class AugmentPolicy:
    flip: bool = True
    affine: bool = True
    color: bool = True
    rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation: float = 0.1
    color_jitter: float = 0.2

    @property
    def enabled(self) -> bool:
        return self.flip or self.affine or self.color


# ---------------------------------------------------------------------------
# shape rasterization


def _shape_mask(shape_class: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if shape_class == "disk":
        return x * x + y * y <= 0.55 ** 2
    if shape_class == "rectangle":
        return (np.abs(x) <= 0.62) & (np.abs(y) <= 0.34)
    if shape_class == "triangle":
        verts = [(0.62 * math.cos(a), 0.62 * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
        inside = np.ones_like(x, dtype=bool)
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) >= 0
        return inside
    if shape_class == "cross":
        arm, span = 0.20, 0.62
        return ((np.abs(x) <= arm) & (np.abs(y) <= span)) | ((np.abs(y) <= arm) & (np.abs(x) <= span))
    if shape_class == "annulus":
        r2 = x * x + y * y
        return (r2 >= 0.30 ** 2) & (r2 <= 0.58 ** 2)
    raise ContractViolation(f"unknown shape class '{shape_class}'")


def rasterize_shape(spec: ShapeSpec, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1], supersampled 4x."""
    ss = _SUPERSAMPLE
    xs = (2.0 * np.arange(w * ss) + 1.0) / (w * ss) - 1.0
    ys = (2.0 * np.arange(h * ss) + 1.0) / (h * ss) - 1.0
    x = np.broadcast_to(xs[None, :], (h * ss, w * ss))
    y = np.broadcast_to(ys[:, None], (h * ss, w * ss))
    # map frame coords into shape-local coords (undo translate/scale/rotate)
    xt = x - spec.tx
    yt = y - spec.ty
    th = math.radians(spec.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    xl = (c * xt + s * yt) / spec.scale
    yl = (-s * xt + c * yt) / spec.scale
    mask = _shape_mask(spec.shape_class, xl, yl).astype(np.float64)
    return mask.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _render_texture(tex: TextureSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    if tex.kind == "flat":
        return np.broadcast_to(tex.color_a[:, None, None], (3, h, w)).copy()
    if tex.kind == "stripes":
        u = xs[None, :] * math.cos(tex.angle) + ys[:, None] * math.sin(tex.angle)
        wave = np.sin(math.pi * tex.freq * u + tex.phase) > 0
        return np.where(wave[None], tex.color_a[:, None, None], tex.color_b[:, None, None])
    if tex.kind == "noise":
        u = rng.uniform(0.0, 1.0, (h, w))
        return tex.color_a[:, None, None] * u[None] + tex.color_b[:, None, None] * (1.0 - u[None])
    raise ContractViolation(f"unknown texture kind '{tex.kind}'")


def _luminance(color: np.ndarray) -> float:
    return float(0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2])


def _draw_texture(rng: np.random.Generator, kind: str) -> TextureSpec:
    return TextureSpec(
        kind=kind,
        color_a=rng.uniform(0.0, 1.0, 3),
        color_b=rng.uniform(0.0, 1.0, 3),
        angle=rng.uniform(0.0, math.pi),
        freq=rng.uniform(2.0, 5.0),
        phase=rng.uniform(0.0, 2 * math.pi),
    )


def _mean_color(tex: TextureSpec) -> np.ndarray:
    if tex.kind == "flat":
        return tex.color_a
    return 0.5 * (tex.color_a + tex.color_b)


def sample_shape_spec(rng: np.random.Generator, shape_class: str, noise_max: float = 0.04) -> ShapeSpec:
    for _ in range(200):
        fg = _draw_texture(rng, TEXTURE_KINDS[rng.integers(len(TEXTURE_KINDS))])
        bg = _draw_texture(rng, TEXTURE_KINDS[rng.integers(len(TEXTURE_KINDS))])
        if abs(_luminance(_mean_color(fg)) - _luminance(_mean_color(bg))) >= _MIN_CONTRAST:
            break
    else:
        raise GenerationError("could not draw fg/bg textures with enough contrast")
    scale = rng.uniform(0.5, 1.3)
    return ShapeSpec(
        shape_class=shape_class,
        fg=fg,
        bg=bg,
        rotation_deg=rng.uniform(-180.0, 180.0),
        scale=scale,
        tx=rng.uniform(-0.3, 0.3),  # shape center stays well inside the frame
        ty=rng.uniform(-0.3, 0.3),
        noise_sigma=rng.uniform(0.0, noise_max),
    )


def render_shape_image(spec: ShapeSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = rasterize_shape(spec, h, w)[None]
    fg = _render_texture(spec.fg, h, w, rng)
    bg = _render_texture(spec.bg, h, w, rng)
    img = bg * (1.0 - mask) + fg * mask
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(n: int, classes, h: int, w: int, seed: int, noise_max: float = 0.04) -> LabeledDataset:
    """Balanced, texture-decorrelated shape dataset; deterministic in seed."""
    classes = list(classes)
    if n < len(classes):
        raise ContractViolation(f"need at least {len(classes)} samples for {len(classes)} classes")
    if h < 8 or w < 8:
        raise GenerationError(f"{h}x{w} frame is too small to place shapes")
    for name in classes:
        if name not in SHAPE_CLASSES:
            raise ContractViolation(f"unknown shape class '{name}'")
    rng = np.random.default_rng([seed, 0x5A_E5])
    labels = np.arange(n) % len(classes)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, h, w))
    specs = []
    for i in range(n):
        spec = sample_shape_spec(rng, classes[labels[i]], noise_max)
        images[i] = render_shape_image(spec, h, w, rng)
        specs.append(spec)
    return LabeledDataset(images, labels.astype(np.int64), len(classes), specs)


# ---------------------------------------------------------------------------
# affine warps, distortion, augmentation


def _border_mean(image: np.ndarray) -> np.ndarray:
    top, bottom = image[:, 0, :], image[:, -1, :]
    left, right = image[:, 1:-1, 0], image[:, 1:-1, -1]
    border = np.concatenate([top, bottom, left, right], axis=1)
    return border.mean(axis=1)


def apply_affine(image: np.ndarray, rotation_deg: float, scale: float, translation: tuple[float, float]) -> np.ndarray:
    """Inverse-warp with bilinear sampling; out-of-frame pixels get the
    image's border-mean color. translation is a fraction of width/height."""
    if scale <= 0:
        raise ContractViolation(f"scale must be positive, got {scale}")
    tx, ty = translation
    if rotation_deg == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        return image.copy()
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xo = jj - cx - tx * w
    yo = ii - cy - ty * h
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    xs = (c * xo + s * yo) / scale + cx
    ys = (-s * xo + c * yo) / scale + cy

    # tolerate rounding overshoot at the frame edge (e.g. exact 90-degree
    # turns land on w-1 plus ~1e-16)
    edge = 1e-9
    inside = (xs >= -edge) & (xs <= w - 1 + edge) & (ys >= -edge) & (ys <= h - 1 + edge)
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.int64)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    out = np.empty_like(image)
    fill = _border_mean(image)
    for ch in range(image.shape[0]):
        plane = image[ch]
        val = (
            plane[y0, x0] * (1 - fy) * (1 - fx)
            + plane[y0, x0 + 1] * (1 - fy) * fx
            + plane[y0 + 1, x0] * fy * (1 - fx)
            + plane[y0 + 1, x0 + 1] * fy * fx
        )
        out[ch] = np.where(inside, val, fill[ch])
    return np.clip(out, 0.0, 1.0)


def distortion_params(spec: DistortionSpec, n: int, seed: int):
    """One independent (rotation, scale, tx, ty) draw per image."""
    rng = np.random.default_rng([seed, 0xD157])
    rot = rng.uniform(-spec.rotation_range, spec.rotation_range, n)
    if spec.kind == "RST":
        sc = rng.uniform(spec.scale_range[0], spec.scale_range[1], n)
        tx = rng.uniform(-spec.translation_range, spec.translation_range, n)
        ty = rng.uniform(-spec.translation_range, spec.translation_range, n)
    else:
        sc = np.ones(n)
        tx = np.zeros(n)
        ty = np.zeros(n)
    return rot, sc, tx, ty


def distort_eval_set(dataset: LabeledDataset, spec: DistortionSpec, seed: int) -> LabeledDataset:
    rot, sc, tx, ty = distortion_params(spec, len(dataset), seed)
    images = np.stack([
        apply_affine(dataset.images[i], rot[i], sc[i], (tx[i], ty[i])) for i in range(len(dataset))
    ])
    return LabeledDataset(images, dataset.labels.copy(), dataset.num_classes)


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    if not policy.enabled:
        return image
    out = image
    if policy.flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if policy.affine:
        rot = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        sc = rng.uniform(policy.scale_range[0], policy.scale_range[1])
        tx = rng.uniform(-policy.translation, policy.translation)
        ty = rng.uniform(-policy.translation, policy.translation)
        out = apply_affine(np.ascontiguousarray(out), rot, sc, (tx, ty))
    if policy.color:
        j = policy.color_jitter
        brightness = rng.uniform(1.0 - j, 1.0 + j)
        contrast = rng.uniform(1.0 - j, 1.0 + j)
        mean = out.mean()
        out = (out * brightness - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# CIFAR-10 binary records (1 label byte + 3 x 32 x 32 channel-major bytes)

_RECORD = 3073
_CIFAR_HW = 32


def load_records(path) -> LabeledDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % _RECORD:
        raise FormatError(f"{path}: length {len(blob)} is not a multiple of {_RECORD}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range (valid labels 0-9)")
    pixels = raw[:, 1:].reshape(-1, 3, _CIFAR_HW, _CIFAR_HW).astype(np.float64) / 255.0
    return LabeledDataset(pixels, labels, int(labels.max()) + 1)


def cifar_load(path, split: str) -> LabeledDataset:
    """Standard CIFAR-10 binary layout: a directory holding data_batch_*.bin
    and test_batch.bin, or a single record file."""
    if split not in ("train", "test"):
        raise ContractViolation(f"split must be train or test, got '{split}'")
    if os.path.isdir(path):
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        parts = [load_records(os.path.join(path, name)) for name in names]
        images = np.concatenate([p.images for p in parts])
        labels = np.concatenate([p.labels for p in parts])
        return LabeledDataset(images, labels, 10)
    ds = load_records(path)
    ds.num_classes = max(ds.num_classes, 2)
    return ds


def export_records(dataset: LabeledDataset, path) -> None:
    """Write a dataset in the CIFAR record format (requires 3 x 32 x 32)."""
    if dataset.images.shape[1:] != (3, _CIFAR_HW, _CIFAR_HW):
        raise ContractViolation(f"record format holds 3x32x32 images, got {dataset.images.shape[1:]}")
    if dataset.labels.max() > 9 or dataset.labels.min() < 0:
        raise ContractViolation("record format holds labels 0-9")
    quant = np.floor(dataset.images * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        for i in range(len(dataset)):
            f.write(bytes([int(dataset.labels[i])]))
            f.write(quant[i].tobytes())
