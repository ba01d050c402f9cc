"""Moment-weighted feature reconstruction, heatmap rendering, and bit-exact
PGM/PPM image IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) float
    norm_min: float | None = None  # record of the min/max used to normalize
    norm_max: float | None = None


@dataclass
class RenderSpec:
    colormap: str = "diverging"  # grayscale | diverging
    overlay_alpha: float = 1.0
    upscale: int = 1

    def validate(self) -> None:
        if self.colormap not in ("grayscale", "diverging"):
            raise ContractViolation(f"unknown colormap '{self.colormap}'")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ContractViolation("overlay_alpha must be in [0, 1]")
        if self.upscale < 1 or int(self.upscale) != self.upscale:
            raise ContractViolation("upscale must be a positive integer")


def reconstruct(moments: np.ndarray, basis: np.ndarray, features: np.ndarray) -> Heatmap:
    """Single-map summary V = sum_c m_c * (basis_c * features_c).

    moments: (C,), basis and features: (C, H, W). Bilinear in (moments,
    features) with the basis held fixed.
    """
    moments = np.asarray(moments, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if moments.ndim != 1 or basis.ndim != 3 or features.ndim != 3:
        raise ContractViolation("reconstruct expects moments (C,), basis/features (C, H, W)")
    if not (moments.shape[0] == basis.shape[0] == features.shape[0]) or basis.shape != features.shape:
        raise ContractViolation(
            f"channel/shape mismatch: moments {moments.shape}, basis {basis.shape}, features {features.shape}")
    values = np.einsum("c,chw->hw", moments, basis * features)
    return Heatmap(values)


def normalize_heatmap(hm: Heatmap) -> Heatmap:
    """Min-max to [0, 1]; a constant map normalizes to all 0.5."""
    vmin = float(hm.values.min())
    vmax = float(hm.values.max())
    if vmax == vmin:
        return Heatmap(np.full_like(hm.values, 0.5), vmin, vmax)
    return Heatmap((hm.values - vmin) / (vmax - vmin), vmin, vmax)


def _colormap(hm: Heatmap, kind: str) -> np.ndarray:
    if kind == "grayscale":
        g = normalize_heatmap(hm).values
        return np.stack([g, g, g])
    # diverging, anchored at value 0: negative -> blue, positive -> red
    peak = float(np.abs(hm.values).max())
    t = hm.values / peak if peak > 0 else np.zeros_like(hm.values)
    pos = np.clip(t, 0.0, 1.0)
    neg = np.clip(-t, 0.0, 1.0)
    r = 1.0 - neg
    g = 1.0 - pos - neg + pos * neg  # white at 0, fades toward either pole
    b = 1.0 - pos
    return np.stack([r, np.clip(g, 0.0, 1.0), b])


def render(hm: Heatmap, base_image: np.ndarray, spec: RenderSpec) -> np.ndarray:
    """alpha * colormap(heatmap) + (1 - alpha) * base, optionally upscaled
    by nearest neighbor. base_image: (3, H, W) in [0, 1]."""
    spec.validate()
    base_image = np.asarray(base_image, dtype=np.float64)
    if base_image.ndim != 3 or base_image.shape[0] != 3 or base_image.shape[1:] != hm.values.shape:
        raise ContractViolation(f"base image {base_image.shape} does not match heatmap {hm.values.shape}")
    cm = _colormap(hm, spec.colormap)
    out = spec.overlay_alpha * cm + (1.0 - spec.overlay_alpha) * base_image
    if spec.upscale > 1:
        out = out.repeat(spec.upscale, axis=1).repeat(spec.upscale, axis=2)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PGM (P5) / PPM (P6) binary IO, maxval 255, rounding floor(v*255 + 0.5)


def _quantize(values: np.ndarray) -> np.ndarray:
    if values.min() < 0.0 or values.max() > 1.0:
        raise ContractViolation("image values must lie in [0, 1]")
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def write_pgm(gray: np.ndarray, path) -> None:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 1 or gray.shape[1] < 1:
        raise ContractViolation(f"write_pgm expects a non-empty HxW array, got {gray.shape}")
    payload = _quantize(gray)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(payload.tobytes())


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.shape[1] < 1 or rgb.shape[2] < 1:
        raise ContractViolation(f"write_ppm expects a non-empty 3xHxW array, got {rgb.shape}")
    payload = _quantize(rgb).transpose(1, 2, 0)  # interleave rows top-to-bottom
    h, w = rgb.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(payload.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5 or P6 file into (H, W) or (3, H, W) floats in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    fields: list[bytes] = []
    off = 0
    while len(fields) < 4 and off < len(blob):
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if blob[off : off + 1] == b"#":
            while off < len(blob) and blob[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        fields.append(blob[start:off])
    if len(fields) < 4 or fields[0] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header field: {exc}") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: unsupported header (need maxval 255)")
    off += 1  # single whitespace byte after maxval
    channels = 1 if fields[0] == b"P5" else 3
    need = w * h * channels
    payload = blob[off : off + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload is truncated")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, 3).transpose(2, 0, 1)


def dump_bases(model, level: int, sample: np.ndarray, out_dir, channels=None) -> list[str]:
    """Write one PGM per basis channel of the given level (1-based), for one
    input image. Level 1 bases are input-independent; levels >= 2 depend on
    the sample through the affine path."""
    import os

    from . import tensor as T

    if not 1 <= level <= model.config.levels:
        raise ContractViolation(f"level {level} out of range 1..{model.config.levels}")
    trace: list = []
    with T.no_grad():
        model.forward(sample[None], training=False, trace=trace)
    basis = trace[level - 1]["basis"][0]  # (C, H, W)
    if channels is None:
        channels = range(basis.shape[0])
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in channels:
        field = basis[c]
        span = field.max() - field.min()
        norm = (field - field.min()) / span if span > 0 else np.full_like(field, 0.5)
        path = os.path.join(out_dir, f"level{level}_chan{c}.pgm")
        write_pgm(norm, path)
        paths.append(path)
    return paths
