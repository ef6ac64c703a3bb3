"""Differentiable layer primitives on dense (batch, channel, height, width) arrays.

Parameters live in the training dtype (float32 by default). Every reduction
accumulates in float64 and the result is cast back to the storage dtype, so
one code path serves both float32 training and float64 gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NumericError, ShapeError

KERNEL_SIZES = (1, 3, 5)


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _check_4d(a, what):
    if a.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {a.shape}")


@dataclass
class Param:
    """Named trainable tensor with its momentum buffer and weight-decay flag.

    `grad` is filled by the layer backward passes and consumed (then cleared)
    by `sgd_step`.
    """

    name: str
    data: np.ndarray
    vel: np.ndarray | None = None
    decay: bool = True
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.vel is None:
            self.vel = np.zeros_like(self.data)


@dataclass
class ConvParams:
    """Same-padded square convolution: weights (out_c, in_c, k, k), bias (out_c,)."""

    w: Param
    b: Param
    pad: int


@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization with running statistics."""

    scale: Param
    shift: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


def make_conv_params(name, in_c, out_c, k, dtype=np.float32):
    """Allocate zeroed convolution parameters; k must be 1, 3, or 5."""
    if k not in KERNEL_SIZES:
        raise ConfigError(f"conv '{name}': kernel size {k} not in {KERNEL_SIZES}")
    if in_c < 1 or out_c < 1:
        raise ConfigError(f"conv '{name}': channel counts must be positive")
    w = Param(f"{name}.w", np.zeros((out_c, in_c, k, k), dtype=dtype))
    b = Param(f"{name}.b", np.zeros(out_c, dtype=dtype), decay=False)
    return ConvParams(w=w, b=b, pad=(k - 1) // 2)


def make_batchnorm_params(name, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
    if channels < 1:
        raise ConfigError(f"batchnorm '{name}': channel count must be positive")
    if not 0.0 < momentum < 1.0:
        raise ConfigError(f"batchnorm '{name}': momentum must be in (0, 1)")
    return BatchNormParams(
        scale=Param(f"{name}.scale", np.ones(channels, dtype=dtype)),
        shift=Param(f"{name}.shift", np.zeros(channels, dtype=dtype)),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        eps=eps,
        momentum=momentum,
    )


def conv2d_forward(x, p):
    """Zero-padded "same" convolution.

    out[n,o,y,x] = b[o] + sum_{i,dy,dx} w[o,i,dy,dx] * in_pad[n,i,y+dy,x+dx]
    """
    _check_4d(x, "conv input")
    w = p.w.data
    out_c, in_c, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ShapeError(
            f"conv '{p.w.name}': input shape {x.shape} does not match weight shape {w.shape}"
        )
    x64 = _f64(x)
    w64 = _f64(w)
    if kh == 1:  # 1x1 kernels are a per-pixel channel mix: one batched matmul
        out = np.matmul(w64[:, :, 0, 0][None], x64.reshape(n, c, h * wd))
        out = out.reshape(n, out_c, h, wd)
    else:
        xp = np.pad(x64, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        out = np.einsum("ncyxuv,ocuv->noyx", win, w64, optimize=True)
    out += _f64(p.b.data)[None, :, None, None]
    return out.astype(np.result_type(x.dtype, w.dtype), copy=False)


def conv2d_backward(x, p, grad_out):
    """Gradients of conv2d_forward; returns (grad_input, grad_w, grad_b)."""
    _check_4d(x, "conv input")
    _check_4d(grad_out, "conv grad_out")
    w = p.w.data
    out_c, in_c, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ShapeError(
            f"conv '{p.w.name}': input shape {x.shape} does not match weight shape {w.shape}"
        )
    if grad_out.shape != (n, out_c, h, wd):
        raise ShapeError(
            f"conv '{p.w.name}': grad_out shape {grad_out.shape} does not match "
            f"output shape {(n, out_c, h, wd)}"
        )
    x64 = _f64(x)
    w64 = _f64(w)
    g64 = _f64(grad_out)
    if kh == 1:
        g2 = g64.reshape(n, out_c, h * wd)
        x2 = x64.reshape(n, c, h * wd)
        grad_b = g2.sum(axis=(0, 2))
        grad_w = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = np.matmul(w64[:, :, 0, 0].T[None], g2).reshape(n, c, h, wd)
    else:
        xp = np.pad(x64, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        grad_b = g64.sum(axis=(0, 2, 3))
        grad_w = np.einsum("noyx,ncyxuv->ocuv", g64, win, optimize=True)
        # input gradient = same-padded correlation of grad_out with the
        # spatially flipped, (out,in)-transposed kernel
        gp = np.pad(g64, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gx = np.einsum("noyxuv,oiuv->niyx", gwin, w64[:, :, ::-1, ::-1], optimize=True)
    return (
        gx.astype(x.dtype, copy=False),
        grad_w.astype(w.dtype, copy=False),
        grad_b.astype(p.b.data.dtype, copy=False),
    )


def _bn_check(x, p):
    _check_4d(x, "batchnorm input")
    c = p.scale.data.shape[0]
    if x.shape[1] != c:
        raise ShapeError(
            f"batchnorm '{p.scale.name}': input shape {x.shape} does not match "
            f"channel count {c}"
        )


def batchnorm_forward(x, p, training):
    """Normalize per channel over (n, h, w); train mode updates running stats.

    Training uses batch statistics (population variance) and folds them into
    the running estimates by exponential moving average; eval uses the running
    estimates.
    """
    _bn_check(x, p)
    x64 = _f64(x)
    if training:
        if x.shape[0] * x.shape[2] * x.shape[3] == 1:
            raise DataError(
                f"batchnorm '{p.scale.name}': cannot compute batch statistics over a "
                "single value (n*h*w == 1) in training mode"
            )
        mean = x64.mean(axis=(0, 2, 3), keepdims=True)
        centered = x64 - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        m = p.momentum
        p.running_mean[...] = ((1.0 - m) * _f64(p.running_mean) + m * mean.ravel()).astype(
            p.running_mean.dtype
        )
        p.running_var[...] = ((1.0 - m) * _f64(p.running_var) + m * var.ravel()).astype(
            p.running_var.dtype
        )
    else:
        mean = _f64(p.running_mean).reshape(1, -1, 1, 1)
        centered = x64 - mean
        var = _f64(p.running_var).reshape(1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv
    out = xhat * _f64(p.scale.data)[None, :, None, None] + _f64(p.shift.data)[None, :, None, None]
    return out.astype(np.result_type(x.dtype, p.scale.data.dtype), copy=False)


def batchnorm_backward(x, p, grad_out):
    """Gradient of the training-mode forward; returns (grad_x, grad_scale, grad_shift).

    Batch statistics are recomputed from `x`, so `x` must be the same tensor
    the forward pass saw.
    """
    _bn_check(x, p)
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"batchnorm '{p.scale.name}': grad_out shape {grad_out.shape} does not "
            f"match input shape {x.shape}"
        )
    x64 = _f64(x)
    g64 = _f64(grad_out)
    mean = x64.mean(axis=(0, 2, 3), keepdims=True)
    centered = x64 - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv

    count = x.shape[0] * x.shape[2] * x.shape[3]
    g_sum = g64.sum(axis=(0, 2, 3), keepdims=True)
    gxhat_sum = (g64 * xhat).sum(axis=(0, 2, 3), keepdims=True)
    scale = _f64(p.scale.data)[None, :, None, None]
    gx = scale * inv * (g64 - g_sum / count - xhat * (gxhat_sum / count))
    grad_scale = gxhat_sum.reshape(-1)
    grad_shift = g_sum.reshape(-1)
    return (
        gx.astype(x.dtype, copy=False),
        grad_scale.astype(p.scale.data.dtype, copy=False),
        grad_shift.astype(p.shift.data.dtype, copy=False),
    )


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Gradient gated at x > 0; the gradient at exactly 0 is 0."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu: grad_out shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0)


def dropout(x, rate, training, rng=None):
    """Inverted dropout; returns (output, keep_mask).

    Training zeroes each element with probability `rate` and scales survivors
    by 1/(1-rate) so eval is the identity. The mask is drawn from `rng`.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ConfigError("dropout in training mode requires an rng")
    mask = rng.random(x.shape) >= rate
    return (x * mask) * (1.0 / (1.0 - rate)), mask


def dropout_backward(grad_out, mask, rate):
    if grad_out.shape != mask.shape:
        raise ShapeError(f"dropout: grad_out shape {grad_out.shape} != mask shape {mask.shape}")
    return (grad_out * mask) * (1.0 / (1.0 - rate))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax at the label index; returns (loss, grad_logits).

    Accepts logits shaped (n, classes) or (n, classes, 1, 1); the gradient is
    (softmax - onehot) / n, returned in the input shape. Max-subtraction keeps
    the exponentials stable.
    """
    orig_shape = logits.shape
    if logits.ndim == 4:
        if logits.shape[2] != 1 or logits.shape[3] != 1:
            raise ShapeError(f"logits must be (n, classes, 1, 1) or (n, classes), got {orig_shape}")
        flat = logits.reshape(orig_shape[0], orig_shape[1])
    elif logits.ndim == 2:
        flat = logits
    else:
        raise ShapeError(f"logits must be (n, classes, 1, 1) or (n, classes), got {orig_shape}")

    n, n_classes = flat.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"label {int(labels[i])} at index {i} out of range [0, {n_classes})")

    z = _f64(flat)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(flat.dtype, copy=False).reshape(orig_shape)


def sgd_step(params, lr, momentum, weight_decay, iteration=None):
    """Momentum SGD update over params carrying a filled `.grad`.

    v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Weight decay is
    skipped for params flagged decay=False (biases). Non-finite gradients
    abort with the parameter name (and iteration when given).
    """
    where = "" if iteration is None else f" at iteration {iteration}"
    for p in params:
        g = p.grad
        if g is None:
            raise ConfigError(f"parameter '{p.name}' has no gradient{where}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'{where}")
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        p.vel *= momentum
        p.vel -= lr * g
        p.data += p.vel
        p.grad = None


@dataclass
class GradCheckReport:
    """Worst-case finite-difference errors per checked tensor."""

    max_rel: dict
    max_abs: dict
    passed: bool
    failures: list

    def worst_rel(self):
        return max(self.max_rel.values()) if self.max_rel else 0.0


def grad_check(f, tensors, rel_tol=1e-3, abs_floor=1e-6, step=1e-3, loss_fn=None):
    """Compare analytic gradients against central finite differences.

    `f()` evaluates the fragment and returns (loss, grads) where grads maps
    each name in `tensors` to the analytic gradient of the loss. `tensors`
    holds the live arrays (float64 recommended); each element is perturbed
    in place by +-step and restored. `loss_fn`, when given, is a cheaper
    loss-only evaluation used for the perturbed points. An element passes if
    its relative error is within rel_tol or its absolute error is within
    abs_floor; the report keeps per-tensor maxima.
    """
    eval_loss = loss_fn if loss_fn is not None else (lambda: f()[0])
    _, grads = f()
    max_rel = {}
    max_abs = {}
    failures = []
    for name, arr in tensors.items():
        if name not in grads:
            raise ConfigError(f"grad_check: f() returned no gradient for '{name}'")
        analytic = np.asarray(grads[name], dtype=np.float64).ravel()
        if analytic.shape != (arr.size,):
            raise ShapeError(
                f"grad_check: gradient shape {grads[name].shape} != tensor shape {arr.shape} "
                f"for '{name}'"
            )
        flat = arr.reshape(-1)
        worst_rel = 0.0
        worst_abs = 0.0
        ok = True
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = eval_loss()
            flat[i] = orig - step
            lm = eval_loss()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = analytic[i]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-12)
            worst_rel = max(worst_rel, rel_err)
            worst_abs = max(worst_abs, abs_err)
            if rel_err > rel_tol and abs_err > abs_floor:
                ok = False
        max_rel[name] = worst_rel
        max_abs[name] = worst_abs
        if not ok:
            failures.append(name)
    return GradCheckReport(max_rel=max_rel, max_abs=max_abs, passed=not failures, failures=failures)
