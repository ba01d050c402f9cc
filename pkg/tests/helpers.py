"""Shared test utilities: the central finite-difference gradient oracle and
small fixture builders. The oracle is independent of the autodiff engine: it
only calls forward passes."""

import numpy as np

from momentnet import tensor as T


def numeric_grad(loss_fn, tensor, eps=1e-5, stats=()):
    """Central differences d loss / d tensor, one element at a time.

    ``stats`` lists mutable arrays (batch-norm running buffers) that forward
    passes update; they are restored after every probe so each evaluation
    sees identical state.
    """
    saved = [np.array(s, copy=True) for s in stats]

    def restore():
        for s, sv in zip(stats, saved):
            s[...] = sv

    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            restore()
            flat[i] = orig - eps
            down = float(loss_fn().data)
            restore()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn, tensors, eps=1e-5, tol=1e-4, stats=()):
    """Backward once, then FD-check every tensor; returns worst rel err."""
    saved = [np.array(s, copy=True) for s in stats]
    loss = loss_fn()
    T.backward(loss)
    analytic = {}
    for t in tensors:
        assert t.grad is not None, f"no gradient reached {t.name}"
        analytic[id(t)] = t.grad.copy()
        t.grad = None
    for s, sv in zip(stats, saved):
        s[...] = sv
    worst = 0.0
    for t in tensors:
        num = numeric_grad(loss_fn, t, eps=eps, stats=stats)
        err = rel_err(analytic[id(t)], num)
        assert err < tol, f"gradient mismatch for {t.name}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def rng(seed=0):
    return np.random.default_rng(seed)


def rand_tensor(shape, seed=0, requires_grad=True, scale=1.0, name="x"):
    return T.Tensor(rng(seed).standard_normal(shape) * scale, requires_grad=requires_grad, name=name)


# canonical asymmetric L fixture: arm extents in [-1, 1] frame coordinates,
# rasterized with 4x supersampling at any rotation angle
_L_GEOM = (-0.6, -0.2, -0.65, 0.65, 0.6, 0.15)


def l_shape_fixture(angle_deg=0.0, n=64, ss=4):
    import math

    x0, x1, y0, y1, hx1, hy0 = _L_GEOM
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    u = (2.0 * np.arange(n * ss) + 1.0) / (n * ss) - 1.0
    x = np.broadcast_to(u[None, :], (n * ss, n * ss))
    y = np.broadcast_to(u[:, None], (n * ss, n * ss))
    xl = c * x + s * y
    yl = -s * x + c * y
    vert = (xl >= x0) & (xl <= x1) & (yl >= y0) & (yl <= y1)
    horz = (xl >= x0) & (xl <= hx1) & (yl >= hy0) & (yl <= y1)
    mask = (vert | horz).astype(np.float64)
    return mask.reshape(n, ss, n, ss).mean(axis=(1, 3))
