"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every differentiable op appends its output node to
a module-level tape in execution order, so the tape itself is a topological
order. ``backward`` walks it once in reverse, accumulates gradients into every
``requires_grad`` leaf, then clears the tape.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractViolation

# Working buffers are kept below glibc's dynamic mmap threshold so freed
# blocks are recycled from the heap instead of faulting in fresh pages
# (a ~150 ms/GB penalty on small VMs).
_CHUNK_BYTES = 8 << 20

_tape: list["Tensor"] = []
_grad_enabled: bool = True


class Tensor:
    """A float64 ndarray plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def is_leaf(self) -> bool:
        return self._backward is None and not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise_non_finite(self)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def raise_non_finite(t: Tensor) -> None:
    from .errors import NumericsError

    raise NumericsError(f"non-finite values in tensor '{t.name or '<unnamed>'}' with shape {t.data.shape}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def graph_size() -> int:
    return len(_tape)


def clear_graph() -> None:
    for node in _tape:
        node._backward = None
        node._parents = ()
    _tape.clear()


def first_non_finite() -> Tensor | None:
    """First recorded node holding NaN/Inf, in execution order."""
    for node in _tape:
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(out_data, requires_grad=True, name=name)
        out._parents = parents
        out._backward = backward
        _tape.append(out)
        return out
    return Tensor(out_data, name=name)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # ``own=True`` promises g is freshly allocated and unshared. An unowned
    # grad may alias another node's array, so it is never mutated in place;
    # an owned one may be.
    if t.grad is None:
        t.grad = g
        t._grad_owned = own
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; fills leaf grads, clears the graph."""
    if loss.data.shape != ():
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise ContractViolation("backward target was not produced by a recorded graph")
    loss.grad = np.ones((), dtype=np.float64)
    loss._grad_owned = True
    for node in reversed(_tape):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node, node.grad)
        if node._parents:
            node.grad = None  # free interior grads as soon as they are consumed
    clear_graph()


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(node, g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _record(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(node, g):
        if a.requires_grad:
            _accum(a, g * b.data, own=True)
        if b.requires_grad:
            _accum(b, g * a.data, own=True)

    return _record(a.data * b.data, (a, b), bwd, "mul")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bwd(node, g):
        _accum(x, g * (node.data > 0.0), own=True)

    return _record(out_data, (x,), bwd, "relu")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bwd(node, g):
        _accum(x, np.full(x.data.shape, float(g)), own=True)

    return _record(np.asarray(x.data.sum()), (x,), bwd, "sum")


def scale(x: Tensor, s: float) -> Tensor:
    def bwd(node, g):
        _accum(x, g * s, own=True)

    return _record(x.data * s, (x,), bwd, "scale")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(node, g):
        _accum(x, g.reshape(x.data.shape))

    return _record(x.data.reshape(shape), (x,), bwd, "reshape")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(node, g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
            x._grad_owned = True
        if x._grad_owned:
            x.grad[idx] += g
        else:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.grad = x.grad + full
            x._grad_owned = True

    return _record(np.ascontiguousarray(x.data[idx]), (x,), bwd, "narrow")


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(node, g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd, "concat")


def global_mean_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C), dividing by exactly H*W."""
    if x.data.ndim != 4:
        raise ContractViolation(f"global_mean_pool expects BxCxHxW, got {x.data.shape}")
    hw = x.data.shape[2] * x.data.shape[3]
    out_data = x.data.sum(axis=(2, 3)) / hw

    def bwd(node, g):
        _accum(x, np.broadcast_to((g / hw)[:, :, None, None], x.data.shape).copy(), own=True)

    return _record(out_data, (x,), bwd, "global_mean_pool")


# ---------------------------------------------------------------------------
# linear / conv / batchnorm


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: (B, D_in), weight: (D_out, D_in), bias: (D_out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ContractViolation(f"linear: shapes {x.data.shape} and {weight.data.shape} are incompatible")
    if bias.data.shape != (weight.data.shape[0],):
        raise ContractViolation(f"linear: bias shape {bias.data.shape} does not match D_out")
    out_data = x.data @ weight.data.T + bias.data

    def bwd(node, g):
        if x.requires_grad:
            _accum(x, g @ weight.data, own=True)
        if weight.requires_grad:
            _accum(weight, g.T @ x.data, own=True)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0), own=True)

    return _record(out_data, (x, weight, bias), bwd, "linear")


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> rows (B*OH*OW, C*k*k) for a padded input."""
    b, c, hp, wp = x.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if k == 1 and stride == 1:
        return x.transpose(0, 2, 3, 1).reshape(b * hp * wp, c)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # pointwise conv: a single GEMM over flattened locations; the column
    # matrix is cached for the weight gradient, and the input gradient is
    # left as a lazy transpose view (one pass saved each way)
    b, cin, h, w = x.data.shape
    cout = weight.data.shape[0]
    w_mat = weight.data.reshape(cout, cin)
    cols = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    out_data = np.empty((b, cout, h, w))
    np.add(
        (cols @ w_mat.T).reshape(b, h, w, cout).transpose(0, 3, 1, 2),
        bias.data[None, :, None, None],
        out=out_data,
    )

    def bwd(node, g):
        g_rows = None
        if weight.requires_grad or x.requires_grad:
            g_rows = g.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
        if weight.requires_grad:
            _accum(weight, (g_rows.T @ cols).reshape(weight.data.shape), own=True)
        if x.requires_grad:
            _accum(x, (g_rows @ w_mat).reshape(b, h, w, cin).transpose(0, 3, 1, 2), own=True)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    return _record(out_data, (x, weight, bias), bwd, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation. x: (B, C_in, H, W), weight: (C_out, C_in, k, k).

    padding defaults to (k-1)//2, which preserves H x W at stride 1 for odd k.
    The batch dimension is processed in chunks sized to keep the im2col buffer
    small; columns are recomputed in the backward pass instead of retained.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-d input and weight")
    b, cin, h, w = x.data.shape
    cout, cin_w, k, k2 = weight.data.shape
    if k != k2:
        raise ContractViolation("conv2d kernels must be square")
    if cin != cin_w:
        raise ContractViolation(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if bias.data.shape != (cout,):
        raise ContractViolation(f"conv2d: bias shape {bias.data.shape} does not match C_out={cout}")
    if stride < 1:
        raise ContractViolation("conv2d stride must be >= 1")
    if padding is None:
        padding = (k - 1) // 2
    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)
    oh = _conv_out_size(h, k, stride, padding)
    ow = _conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ContractViolation("conv2d output would be empty")

    w_mat = weight.data.reshape(cout, cin * k * k)
    chunk = max(1, int(_CHUNK_BYTES // max(1, oh * ow * cin * k * k * 8)))

    def pad_input(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    out_data = np.empty((b, cout, oh, ow))
    for lo in range(0, b, chunk):
        hi = min(b, lo + chunk)
        cols = _im2col(pad_input(x.data[lo:hi]), k, stride)
        np.add(
            (cols @ w_mat.T).reshape(hi - lo, oh, ow, cout).transpose(0, 3, 1, 2),
            bias.data[None, :, None, None],
            out=out_data[lo:hi],
        )

    def bwd(node, g):
        if weight.requires_grad or x.requires_grad:
            dw = np.zeros_like(w_mat) if weight.requires_grad else None
            dx = np.zeros((b, cin, h + 2 * padding, w + 2 * padding)) if x.requires_grad else None
            for lo in range(0, b, chunk):
                hi = min(b, lo + chunk)
                g_rows = g[lo:hi].transpose(0, 2, 3, 1).reshape((hi - lo) * oh * ow, cout)
                if dw is not None:
                    cols = _im2col(pad_input(x.data[lo:hi]), k, stride)
                    dw += g_rows.T @ cols
                if dx is not None:
                    dcols = g_rows @ w_mat  # (rows, C_in*k*k)
                    dcols = dcols.reshape(hi - lo, oh, ow, cin, k, k)
                    for ki in range(k):
                        for kj in range(k):
                            dx[lo:hi, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                            )
            if dw is not None:
                _accum(weight, dw.reshape(weight.data.shape), own=True)
            if dx is not None:
                if padding:
                    dx = dx[:, :, padding : padding + h, padding : padding + w]
                _accum(x, np.ascontiguousarray(dx), own=True)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    return _record(out_data, (x, weight, bias), bwd, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode uses batch statistics and updates the running buffers in place
    (unbiased variance, exponential factor ``momentum``); eval mode uses the
    running buffers. Requires batch >= 2 in train mode.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"batchnorm2d expects BxCxHxW, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ContractViolation("batchnorm2d: gamma/beta must have one entry per channel")
    if training and b < 2:
        raise ContractViolation("batchnorm2d in train mode requires a batch of at least 2 samples")

    if training:
        n = b * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        sq = np.einsum("bchw,bchw->c", x.data, x.data) / n
        var = np.maximum(sq - mean * mean, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)

    out_data = x.data - mean[None, :, None, None]
    out_data *= (gamma.data * inv_std)[None, :, None, None]
    out_data += beta.data[None, :, None, None]

    def bwd(node, g):
        x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        if gamma.requires_grad:
            _accum(gamma, np.einsum("bchw,bchw->c", g, x_hat), own=True)
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)), own=True)
        if x.requires_grad:
            gs = g * (gamma.data * inv_std)[None, :, None, None]
            if training:
                n = b * h * w
                m1 = gs.mean(axis=(0, 2, 3))
                m2 = np.einsum("bchw,bchw->c", gs, x_hat) / n
                dx = gs - m1[None, :, None, None] - x_hat * m2[None, :, None, None]
            else:
                dx = gs
            _accum(x, dx, own=True)

    return _record(out_data, (x, gamma, beta), bwd, "batchnorm2d")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; max-stabilized."""
    if logits.data.ndim != 2:
        raise ContractViolation(f"softmax_cross_entropy expects BxK logits, got {logits.data.shape}")
    b, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ContractViolation("labels must be a vector matching the batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractViolation(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(b), labels].mean()
    probs = np.exp(log_probs)

    def bwd(node, g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        _accum(logits, d * (float(g) / b), own=True)

    return _record(np.asarray(loss), (logits,), bwd, "softmax_cross_entropy")


def transform_grid_op(affine: Tensor, grid: np.ndarray) -> Tensor:
    """Apply per-sample, per-channel affine maps to a canonical grid.

    affine: (B, C, 6) laid out as [a11, a12, a21, a22, tx, ty];
    grid: constant (2, H, W). Returns (B, C, 2, H, W); coordinates are not
    clamped (bases are evaluated analytically, never sampled from an image).
    """
    if affine.data.ndim != 3 or affine.data.shape[2] != 6:
        raise ContractViolation(f"affine params must be BxCx6, got {affine.data.shape}")
    if grid.shape[0] != 2:
        raise ContractViolation("grid must be 2xHxW")
    mats = affine.data[:, :, :4].reshape(*affine.data.shape[:2], 2, 2)
    trans = affine.data[:, :, 4:6]
    out_data = np.einsum("bcij,jhw->bcihw", mats, grid)
    out_data += trans[:, :, :, None, None]

    def bwd(node, g):
        if affine.requires_grad:
            da = np.empty_like(affine.data)
            da[:, :, :4] = np.einsum("bcihw,jhw->bcij", g, grid).reshape(*affine.data.shape[:2], 4)
            da[:, :, 4:6] = g.sum(axis=(3, 4))
            _accum(affine, da, own=True)

    return _record(out_data, (affine,), bwd, "transform_grid")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        raise ContractViolation("total_steps must be positive")
    if step > total_steps:
        raise ContractViolation(f"step {step} exceeds schedule length {total_steps}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
