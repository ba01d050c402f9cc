"""Classical geometric image moments, orientation, and the seven
rotation/translation/scale invariants.

These are the analytic reference implementations the learned-moment pipeline
is validated against. Two coordinate conventions are supported:

* ``"index"``: x is the column index 0..W-1, y is the row index 0..H-1.
* ``"normalized"``: x = -1 + 2j/(W-1), y = -1 + 2i/(H-1), matching the
  coordinate grid the learned bases are evaluated on.

In both, x varies along image width.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import atan2, comb

import numpy as np

from .errors import ContractViolation, DegenerateImageError, OrientationUndefinedError

MAX_SUPPORTED_ORDER = 6  # monomials become ill-conditioned beyond this


@dataclass
class MomentTable:
    """All moments m_pq (or mu_pq / eta_pq) with p+q <= max_order."""

    values: dict[tuple[int, int], float]
    max_order: int
    coords: str
    kind: str = "raw"  # raw | central | normalized

    def __getitem__(self, pq: tuple[int, int]) -> float:
        return self.values[pq]

    def items(self):
        return sorted(self.values.items())


@dataclass
class HuVector:
    """Hu's seven invariant combinations of normalized central moments."""

    values: np.ndarray  # (7,)

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])


def _axes(h: int, w: int, coords: str) -> tuple[np.ndarray, np.ndarray]:
    if coords == "index":
        return np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    if coords == "normalized":
        return -1.0 + 2.0 * np.arange(w) / (w - 1), -1.0 + 2.0 * np.arange(h) / (h - 1)
    raise ContractViolation(f"unknown coordinate convention '{coords}'")


def raw_moments(image: np.ndarray, max_order: int, coords: str = "index") -> MomentTable:
    """m_pq = sum_x sum_y x^p y^q I(x, y) for all p+q <= max_order.

    The image must be a 2-D nonnegative array. An all-zero image yields a
    valid all-zero table.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractViolation(f"moments expect a 2-D image, got shape {image.shape}")
    if image.min() < 0:
        raise ContractViolation("moments expect a nonnegative image")
    if not 0 <= max_order <= MAX_SUPPORTED_ORDER:
        raise ContractViolation(f"max_order must be in [0, {MAX_SUPPORTED_ORDER}], got {max_order}")
    h, w = image.shape
    xs, ys = _axes(h, w, coords)
    x_pow = np.stack([xs ** p for p in range(max_order + 1)])  # (order+1, W)
    y_pow = np.stack([ys ** q for q in range(max_order + 1)])  # (order+1, H)
    proj = y_pow @ image  # (order+1, W): sum_y y^q I(x, y)
    values = {}
    for q in range(max_order + 1):
        for p in range(max_order + 1 - q):
            values[(p, q)] = float(proj[q] @ x_pow[p])
    return MomentTable(values, max_order, coords, kind="raw")


def centroid(table: MomentTable) -> tuple[float, float]:
    m00 = table[(0, 0)]
    if m00 <= 0:
        raise DegenerateImageError("centroid is undefined for an image with zero mass")
    return table[(1, 0)] / m00, table[(0, 1)] / m00


def central_moments(table: MomentTable) -> MomentTable:
    """mu_pq about the intensity centroid, via the exact binomial shift
    identity applied to the raw table."""
    if table.kind != "raw":
        raise ContractViolation(f"central_moments expects a raw table, got '{table.kind}'")
    xbar, ybar = centroid(table)
    values = {}
    for (p, q), _ in table.items():
        total = 0.0
        for i in range(p + 1):
            for j in range(q + 1):
                total += (
                    comb(p, i) * comb(q, j)
                    * (-xbar) ** (p - i) * (-ybar) ** (q - j)
                    * table[(i, j)]
                )
        values[(p, q)] = total
    return MomentTable(values, table.max_order, table.coords, kind="central")


def normalized_central(table: MomentTable) -> MomentTable:
    """eta_pq = mu_pq / mu_00^(1 + (p+q)/2)."""
    if table.kind != "central":
        raise ContractViolation(f"normalized_central expects a central table, got '{table.kind}'")
    mu00 = table[(0, 0)]
    if mu00 <= 0:
        raise DegenerateImageError("normalization is undefined for an image with zero mass")
    values = {
        (p, q): v / mu00 ** (1.0 + (p + q) / 2.0)
        for (p, q), v in table.items()
    }
    return MomentTable(values, table.max_order, table.coords, kind="normalized")


def orientation(table: MomentTable) -> float:
    """Principal-axis angle theta = 0.5 * atan2(2*mu11, mu20 - mu02),
    in radians, range (-pi/2, pi/2]. Raw tables are centralized first."""
    if table.kind == "raw":
        table = central_moments(table)
    if table.kind != "central":
        raise ContractViolation("orientation needs raw or central moments")
    if table.max_order < 2:
        raise ContractViolation("orientation needs moments up to order 2")
    mu11 = table[(1, 1)]
    mu20 = table[(2, 0)]
    mu02 = table[(0, 2)]
    scale = mu20 + mu02
    if abs(2 * mu11) <= 1e-12 * scale and abs(mu20 - mu02) <= 1e-12 * scale:
        raise OrientationUndefinedError("second-order moments are isotropic; orientation is undefined")
    return 0.5 * atan2(2.0 * mu11, mu20 - mu02)


def hu_invariants(table: MomentTable) -> HuVector:
    """The seven invariants from normalized central moments up to order 3."""
    if table.kind != "normalized":
        raise ContractViolation(f"hu_invariants expects a normalized table, got '{table.kind}'")
    if table.max_order < 3:
        raise ContractViolation("Hu invariants need moments up to order 3")
    n20, n02, n11 = table[(2, 0)], table[(0, 2)], table[(1, 1)]
    n30, n03 = table[(3, 0)], table[(0, 3)]
    n21, n12 = table[(2, 1)], table[(1, 2)]
    a = n30 + n12
    b = n21 + n03
    c = n30 - 3 * n12
    d = 3 * n21 - n03
    phi = np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        c ** 2 + d ** 2,
        a ** 2 + b ** 2,
        c * a * (a ** 2 - 3 * b ** 2) + d * b * (3 * a ** 2 - b ** 2),
        (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b,
        d * a * (a ** 2 - 3 * b ** 2) - c * b * (3 * a ** 2 - b ** 2),
    ])
    return HuVector(phi)


def hu_from_image(image: np.ndarray, coords: str = "index") -> HuVector:
    """Convenience chain: raw -> central -> normalized -> Hu."""
    return hu_invariants(normalized_central(central_moments(raw_moments(image, 3, coords))))
