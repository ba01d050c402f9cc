"""Coordinate grids, learned basis fields, moment projection, and the
level blocks that stack them.

A level projects per-channel image features onto per-channel basis fields
evaluated over a normalized coordinate grid; the spatial mean of each
projected channel is that channel's moment. Second-level blocks re-estimate
a per-channel affine map of the grid from the previous level's moments and
regenerate the bases on the transformed grids.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .nn import BatchNorm2d, Conv2d, Linear, ResidualBlock
from .tensor import Tensor

_GRID_CACHE: dict[tuple[int, int], np.ndarray] = {}

IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


def make_grid(h: int, w: int) -> np.ndarray:
    """Canonical (2, H, W) grid: channel 0 is x in [-1, 1] varying along
    width, channel 1 is y in [-1, 1] varying along height."""
    if h < 2 or w < 2:
        raise ContractViolation(f"grid needs H, W >= 2, got {h}x{w}")
    key = (h, w)
    if key not in _GRID_CACHE:
        xs = -1.0 + 2.0 * np.arange(w) / (w - 1)
        ys = -1.0 + 2.0 * np.arange(h) / (h - 1)
        grid = np.empty((2, h, w))
        grid[0] = xs[None, :]
        grid[1] = ys[:, None]
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return _GRID_CACHE[key]


def batched_grid(h: int, w: int, batch: int) -> Tensor:
    """Canonical grid replicated along a batch dimension, as a constant."""
    return Tensor(np.tile(make_grid(h, w)[None], (batch, 1, 1, 1)))


def fixed_polynomial_basis(grid: np.ndarray, orders: list[tuple[int, int]]) -> np.ndarray:
    """Monomial basis channels x^p * y^q over a canonical grid; the
    non-learned oracle path."""
    x, y = grid[0], grid[1]
    return np.stack([(x ** p) * (y ** q) for p, q in orders])


def identity_affine_params(batch: int, channels: int) -> Tensor:
    return Tensor(np.tile(IDENTITY_AFFINE, (batch, channels, 1)))


def transform_grid(grid: np.ndarray, affine: Tensor) -> Tensor:
    """Per-channel affine re-parameterization of the canonical grid:
    [x'; y'] = [[a11, a12], [a21, a22]] @ [x; y] + [tx; ty]."""
    return T.transform_grid_op(affine, grid)


def project_moments(basis: Tensor, features: Tensor) -> tuple[Tensor, Tensor]:
    """Element-wise basis*features, plus the spatial mean of each channel.

    The mean divides by exactly H*W, so H*W times a moment equals the plain
    double sum of basis-weighted features.
    """
    if basis.shape != features.shape:
        raise ContractViolation(f"basis {basis.shape} and features {features.shape} must agree")
    projected = T.mul(basis, features)
    return projected, T.global_mean_pool(projected)


def attention_add(features: Tensor, projected: Tensor) -> Tensor:
    return T.add(features, projected)


class BasisGenerator:
    """Two 1x1 conv + BN + ReLU stages mapping grid coordinates to C basis
    channels, applied independently at every location."""

    def __init__(self, ch: int, rng, name: str = "basis"):
        self.ch = ch
        self.conv1 = Conv2d(2, ch, 1, rng, name=f"{name}.conv1")
        self.bn1 = BatchNorm2d(ch, name=f"{name}.bn1")
        self.conv2 = Conv2d(ch, ch, 1, rng, name=f"{name}.conv2")
        self.bn2 = BatchNorm2d(ch, name=f"{name}.bn2")

    def _head(self, hidden: Tensor, c: int, training: bool) -> Tensor:
        # channel c of the second conv/BN/ReLU stage, computed in isolation;
        # both evaluation paths share this so they agree bitwise
        w_c = T.narrow(self.conv2.weight, 0, c, 1)
        b_c = T.narrow(self.conv2.bias, 0, c, 1)
        out_c = T.conv2d(hidden, w_c, b_c, 1, 0)
        return T.relu(self.bn2(out_c, training, channel=c))

    def forward_canonical(self, grid: Tensor, training: bool) -> Tensor:
        """grid: (B, 2, H, W) -> basis (B, C, H, W)."""
        if grid.data.ndim != 4 or grid.data.shape[1] != 2:
            raise ContractViolation(f"canonical grid must be Bx2xHxW, got {grid.shape}")
        hidden = T.relu(self.bn1(self.conv1(grid), training))
        return T.concat([self._head(hidden, c, training) for c in range(self.ch)], axis=1)

    def forward_per_channel(self, grids: Tensor, training: bool) -> Tensor:
        """grids: (B, C, 2, H, W) -> basis (B, C, H, W).

        The shared generator is evaluated on each channel's grid; output
        channel c is kept from the evaluation on grid c, so only row c of the
        second conv (and of its BN) is computed. Looping channels keeps every
        working array small.
        """
        if grids.data.ndim != 5 or grids.data.shape[1] != self.ch or grids.data.shape[2] != 2:
            raise ContractViolation(f"per-channel grids must be BxCx2xHxW, got {grids.shape}")
        b, _, _, gh, gw = grids.data.shape
        parts = []
        for c in range(self.ch):
            g = T.reshape(T.narrow(grids, 1, c, 1), (b, 2, gh, gw))
            hidden = T.relu(self.bn1(self.conv1(g), training))
            parts.append(self._head(hidden, c, training))
        return T.concat(parts, axis=1)

    def named_parameters(self):
        out = []
        for m in (self.conv1, self.bn1, self.conv2, self.bn2):
            out.extend(m.named_parameters())
        return out

    def named_stats(self):
        return self.bn1.named_stats() + self.bn2.named_stats()


class AffinePredictor:
    """Two fully connected layers mapping moments (B, C) to per-channel
    affine parameters (B, C, 6). The output layer starts at zero weights with
    an identity-transform bias, so an untrained model reproduces the
    canonical grid exactly."""

    def __init__(self, ch: int, rng, name: str = "affine"):
        self.ch = ch
        self.fc1 = Linear(ch, ch, rng, name=f"{name}.fc1")
        self.fc2 = Linear(ch, 6 * ch, rng, name=f"{name}.fc2", zero_init=True, bias_init=np.tile(IDENTITY_AFFINE, ch))

    def __call__(self, moments: Tensor) -> Tensor:
        out = self.fc2(T.relu(self.fc1(moments)))
        return T.reshape(out, (moments.shape[0], self.ch, 6))

    def named_parameters(self):
        return self.fc1.named_parameters() + self.fc2.named_parameters()

    def named_stats(self):
        return []


class PatchEmbed:
    """Non-overlapping PxP patches linearly embedded; reduces H, W by P."""

    def __init__(self, cin: int, ch: int, patch: int, rng, name: str = "patch"):
        self.patch = patch
        self.proj = Conv2d(cin, ch, patch, rng, stride=patch, padding=0, name=f"{name}.proj")

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.data.shape
        if h % self.patch or w % self.patch:
            raise ContractViolation(f"patch size {self.patch} must divide input dims {h}x{w}")
        return self.proj(x)

    def named_parameters(self):
        return self.proj.named_parameters()

    def named_stats(self):
        return []


class Level1Block:
    """Projects features onto bases generated from the canonical grid."""

    def __init__(self, ch: int, rng, name: str = "level1"):
        self.generator = BasisGenerator(ch, rng, name=f"{name}.basis")

    def forward(self, features: Tensor, grid: np.ndarray, training: bool, trace: list | None = None):
        b = features.data.shape[0]
        basis = self.generator.forward_canonical(Tensor(np.tile(grid[None], (b, 1, 1, 1))), training)
        projected, moments = project_moments(basis, features)
        out = attention_add(features, projected)
        if trace is not None:
            trace.append({"basis": basis.data, "projected": projected.data,
                          "features_in": features.data, "features_out": out.data,
                          "moments": moments.data})
        return out, moments

    def named_parameters(self):
        return self.generator.named_parameters()

    def named_stats(self):
        return self.generator.named_stats()


class Level2Block:
    """Refines features with a residual block, re-estimates per-channel
    affine grids from the previous level's moments, and projects onto bases
    regenerated on those grids. With the affine path disabled the grids stay
    canonical (constant identity transform, no predictor parameters)."""

    def __init__(self, ch: int, kernel: int, rng, affine_enabled: bool = True, name: str = "level2"):
        self.ch = ch
        self.resblock = ResidualBlock(ch, kernel, rng, name=f"{name}.res")
        self.generator = BasisGenerator(ch, rng, name=f"{name}.basis")
        self.predictor = AffinePredictor(ch, rng, name=f"{name}.affine") if affine_enabled else None

    def forward(self, features: Tensor, moments_in: Tensor, grid: np.ndarray, training: bool,
                trace: list | None = None, image_training: bool | None = None):
        f = self.resblock(features, training if image_training is None else image_training)
        b = f.data.shape[0]
        if self.predictor is not None:
            affine = self.predictor(moments_in)
        else:
            affine = identity_affine_params(b, self.ch)
        grids = transform_grid(grid, affine)
        basis = self.generator.forward_per_channel(grids, training)
        projected, moments = project_moments(basis, f)
        out = attention_add(f, projected)
        if trace is not None:
            trace.append({"basis": basis.data, "projected": projected.data,
                          "features_in": f.data, "features_out": out.data,
                          "moments": moments.data, "affine": affine.data, "grids": grids.data})
        return out, moments

    def named_parameters(self):
        out = self.resblock.named_parameters() + self.generator.named_parameters()
        if self.predictor is not None:
            out += self.predictor.named_parameters()
        return out

    def named_stats(self):
        return self.resblock.named_stats() + self.generator.named_stats()
