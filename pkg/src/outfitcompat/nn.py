"""Small differentiable building blocks on float64 numpy arrays.

Every forward op has a matching ``*_backward`` that takes the upstream
gradient plus whatever the forward returned as cache.  Shapes follow the
usual conventions: dense inputs are ``(batch, features)``, images are
``(batch, channels, height, width)`` and conv filters are
``(filters, channels, k, k)``.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "as_tensor",
    "dense_forward",
    "dense_backward",
    "conv2d_forward",
    "conv2d_backward",
    "BatchNormState",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "activation",
    "AdamState",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


def as_tensor(x, checked=True):
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


# -- dense -------------------------------------------------------------------


def dense_forward(x, W, b=None):
    """Affine map ``x @ W.T + b`` with ``W`` stored as (out, in)."""
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError("dense input", ("batch", W.shape[1]), x.shape)
    out = x @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise ShapeError("dense bias", (W.shape[0],), b.shape)
        out = out + b
    return out


def dense_backward(dout, x, W, with_bias=False):
    """Gradients of :func:`dense_forward`; returns ``(dx, dW, db)``."""
    dx = dout @ W
    dW = dout.T @ x
    db = dout.sum(axis=0) if with_bias else None
    return dx, dW, db


# -- conv --------------------------------------------------------------------


def _windows(x, k, stride):
    # (N, C, Ho, Wo, k, k) strided view, no copy
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, filters, stride=1):
    """Valid cross-correlation of a batch of images with a filter bank.

    Output spatial size is ``(H - k) // stride + 1`` per axis.
    """
    if x.ndim != 4:
        raise ShapeError("conv input rank", 4, x.ndim)
    F, C, k, k2 = filters.shape
    if k != k2:
        raise ShapeError("conv filter", "square kernel", filters.shape)
    if x.shape[1] != C:
        raise ShapeError("conv input channels", C, x.shape[1])
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError("conv kernel vs input", f"k <= {x.shape[2:]}", k)
    if stride < 1:
        raise ValueError("stride must be positive")
    win = _windows(x, k, stride)
    out = np.tensordot(win, filters, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dout, x, filters, stride=1):
    """Gradients of :func:`conv2d_forward`; returns ``(dx, dfilters)``."""
    k = filters.shape[2]
    win = _windows(x, k, stride)
    dfilters = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dx = np.zeros_like(x)
    Ho, Wo = dout.shape[2], dout.shape[3]
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, filters[:, :, i, j], axes=([1], [0]))
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                contrib.transpose(0, 3, 1, 2))
    return dx, dfilters


# -- batch norm ----------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-feature affine parameters plus running statistics.

    ``scale`` and ``shift`` are trainable; the running statistics are
    updated in place during train-mode forward passes.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, dim, momentum=0.1, eps=1e-5):
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim),
                   momentum=momentum, eps=eps)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch-norm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batch-norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")


def batchnorm_forward(x, state, mode=None, update_running=True):
    """Normalize ``x`` per feature.

    In train mode the batch statistics are used and the running averages in
    ``state`` are moved towards them by ``momentum`` (unless
    ``update_running`` is false); infer mode reads the running statistics
    only.  Returns ``(out, cache)``; cache is ``None``
    in infer mode.
    """
    mode = mode or state.mode
    if x.ndim != 2 or x.shape[1] != state.scale.shape[0]:
        raise ShapeError("batchnorm input", ("batch", state.scale.shape[0]),
                         x.shape)
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("train-mode batch norm needs a batch of at least 2")
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv_std
        if update_running:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mu
            state.running_var[...] = (1 - m) * state.running_var + m * var * n / (n - 1)
        return state.scale * xhat + state.shift, (xhat, inv_std, state.scale)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean) * inv_std
        return state.scale * xhat + state.shift, None
    raise ValueError(f"unknown batch-norm mode {mode!r}")


def batchnorm_backward(dout, cache):
    """Train-mode batch-norm gradients; returns ``(dx, dscale, dshift)``."""
    xhat, inv_std, scale = cache
    n = dout.shape[0]
    dshift = dout.sum(axis=0)
    dscale = (dout * xhat).sum(axis=0)
    dxhat = dout * scale
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dscale, dshift


# -- activations ---------------------------------------------------------------

_TINY = np.nextafter(0.0, 1.0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``.

    Results are floored at the smallest positive double so the output stays
    strictly inside the open unit interval on the negative side.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return np.maximum(out, _TINY)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Pure: ``params`` and ``state`` are left untouched and new dicts are
    returned as ``(new_params, new_state)``.  Only keys present in ``grads``
    are updated; the rest of ``params`` is carried over by reference.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r}", params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params = dict(params)
    m_new, v_new = dict(state.first_moment), dict(state.second_moment)
    for name, g in grads.items():
        m = b1 * m_new.get(name, 0.0) + (1 - b1) * g
        v = b2 * v_new.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, m_new, v_new)
    return new_params, new_state
