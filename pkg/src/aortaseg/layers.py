"""Differentiable layer primitives on dense [batch, channel, x, y, z] arrays.

Every function is pure: inputs are never modified and outputs are freshly
allocated (dropout takes an explicit seed, batch norm returns its updated
state). float32 is the production dtype; float64 is accepted everywhere and
is what the finite-difference gradient oracles run on.

Layout conventions:
    activations           [N, C, X, Y, Z]
    3x3x3 conv kernels    [C_out, C_in, 3, 3, 3]
    1x1x1 conv kernels    [C_out, C_in, 1, 1, 1]
    up-conv kernels       [C_in, C_out, 2, 2, 1]

All spatial ops preserve the z extent: convolutions are same-padded with
zeros, pooling and up-convolution act on x/y only.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import backend


def _require_5d(name, a):
    if a.ndim != 5:
        raise ValueError(f"{name} must be 5-d [N,C,X,Y,Z], got shape {a.shape}")


def _pad_xyz(x):
    """Zero-pad the three spatial axes by one voxel on each side."""
    n, c, xe, ye, ze = x.shape
    out = np.zeros((n, c, xe + 2, ye + 2, ze + 2), dtype=x.dtype)
    out[:, :, 1:-1, 1:-1, 1:-1] = x
    return out


# ---------------------------------------------------------------------------
# 3x3x3 convolution (same padding)
# ---------------------------------------------------------------------------

def conv3d_forward(x, kernel, bias):
    """Same-padded 3x3x3 convolution. Output spatial extents equal the input's."""
    _require_5d("input", x)
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise ValueError(f"kernel must be [Cout,Cin,3,3,3], got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input shape {x.shape} has {x.shape[1]} channels, "
            f"kernel shape {kernel.shape} expects {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={kernel.shape[0]}")
    xpad = _pad_xyz(np.ascontiguousarray(x))
    out = np.empty((x.shape[0], kernel.shape[0]) + x.shape[2:], dtype=x.dtype)
    backend.conv3d_from_padded(xpad, np.ascontiguousarray(kernel),
                               np.ascontiguousarray(bias), out)
    return out


def conv3d_backward(x, kernel, grad_out):
    """Exact adjoints of conv3d_forward: (grad_input, grad_kernel, grad_bias)."""
    expected = (x.shape[0], kernel.shape[0]) + x.shape[2:]
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape}, expected {expected}")
    grad_out = np.ascontiguousarray(grad_out)
    # grad wrt input: convolve grad_out with the channel-transposed,
    # spatially flipped kernel (valid for stride 1, zero same-padding).
    k_flip = np.ascontiguousarray(kernel.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    gpad = _pad_xyz(grad_out)
    grad_input = np.empty_like(x)
    zero_bias = np.zeros(x.shape[1], dtype=x.dtype)
    backend.conv3d_from_padded(gpad, k_flip, zero_bias, grad_input)

    xpad = _pad_xyz(np.ascontiguousarray(x))
    grad_kernel = np.empty_like(kernel)
    backend.conv3d_grad_kernel(xpad, grad_out, grad_kernel)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    return grad_input, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# 1x1x1 convolution (output head)
# ---------------------------------------------------------------------------

def conv1x1_forward(x, kernel, bias):
    """Per-voxel channel mixing, kernel [Cout, Cin, 1, 1, 1]."""
    _require_5d("input", x)
    if kernel.shape[2:] != (1, 1, 1) or kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"kernel shape {kernel.shape} incompatible with input shape {x.shape}")
    w = kernel[:, :, 0, 0, 0]
    out = np.tensordot(w, x, axes=(1, 1)).transpose(1, 0, 2, 3, 4)
    out += bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out)


def conv1x1_backward(x, kernel, grad_out):
    w = kernel[:, :, 0, 0, 0]
    grad_input = np.tensordot(w.T, grad_out, axes=(1, 1)).transpose(1, 0, 2, 3, 4)
    gw = np.tensordot(grad_out, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_kernel = gw.reshape(kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel running statistics, updated by train-mode forward passes."""
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), False)

    def copy(self):
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.initialized)


def batchnorm_forward(x, gamma, beta, state, mode, eps=1e-5, momentum=0.9):
    """Normalize per channel over batch and spatial dims.

    Train mode uses batch statistics (biased variance) and returns a state
    whose running mean/variance moved by an exponential moving average with
    the given momentum. Infer mode uses the stored running statistics and
    returns the state unchanged.
    """
    _require_5d("input", x)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match "
            f"channel count {x.shape[1]}")
    shape = (1, -1, 1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        new_state = BatchNormState(
            (momentum * state.running_mean + (1.0 - momentum) * mean).astype(x.dtype),
            (momentum * state.running_var + (1.0 - momentum) * var).astype(x.dtype),
            True,
        )
    elif mode == "infer":
        if not state.initialized:
            raise ValueError("batch norm infer mode requires populated running statistics")
        mean, var = state.running_mean, state.running_var
        new_state = state
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    y = gamma.reshape(shape) * ((x - mean.reshape(shape)) * inv_std.reshape(shape))
    y += beta.reshape(shape)
    return y.astype(x.dtype, copy=False), new_state


def batchnorm_backward(x, gamma, grad_out, eps=1e-5):
    """Train-mode gradients; batch statistics are recomputed from x."""
    shape = (1, -1, 1, 1, 1)
    m = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    grad_beta = grad_out.sum(axis=(0, 2, 3, 4))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3, 4))
    # distributes the gradient through the batch mean and variance
    gx = (grad_out - grad_beta.reshape(shape) / m
          - xhat * (grad_gamma.reshape(shape) / m))
    gx *= (gamma * inv_std).reshape(shape)
    return gx.astype(x.dtype, copy=False), grad_gamma.astype(x.dtype, copy=False), \
        grad_beta.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Subgradient at exactly 0 is 0 (strict inequality below)."""
    return np.where(x > 0, grad_out, 0)


# ---------------------------------------------------------------------------
# 2x2x1 max pooling
# ---------------------------------------------------------------------------

class PoolRecord(NamedTuple):
    argmax: np.ndarray   # [N, C, X/2, Y/2, Z] flat index into the 2x2 window
    in_shape: tuple


def _pool_windows(x):
    n, c, xe, ye, ze = x.shape
    r = x.reshape(n, c, xe // 2, 2, ye // 2, 2, ze)
    return r.transpose(0, 1, 2, 4, 6, 3, 5).reshape(n, c, xe // 2, ye // 2, ze, 4)


def maxpool_2x2x1_forward(x):
    """Halve x and y, keep z. Returns (output, record) for the backward pass."""
    _require_5d("input", x)
    n, c, xe, ye, ze = x.shape
    if xe % 2 or ye % 2:
        raise ValueError(
            f"maxpool_2x2x1 needs even x/y extents, got {x.shape[2:4]}; "
            "pad the volume first (see unet.pad_to_grid)")
    win = _pool_windows(x)
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolRecord(argmax, x.shape)


def maxpool_2x2x1_backward(record, grad_out):
    """Route each gradient to the recorded argmax voxel of its window."""
    n, c, xe, ye, ze = record.in_shape
    if grad_out.shape != (n, c, xe // 2, ye // 2, ze):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match pool record "
                         f"for input {record.in_shape}")
    win = np.zeros((n, c, xe // 2, ye // 2, ze, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, record.argmax[..., None], grad_out[..., None], axis=-1)
    gx = win.reshape(n, c, xe // 2, ye // 2, ze, 2, 2)
    gx = gx.transpose(0, 1, 2, 5, 3, 6, 4).reshape(n, c, xe, ye, ze)
    return np.ascontiguousarray(gx)


# ---------------------------------------------------------------------------
# 2x2x1 transposed convolution (stride 2x2x1)
# ---------------------------------------------------------------------------

def upconv_2x2x1_forward(x, kernel, bias):
    """Double x and y, keep z; exact adjoint of a stride-(2,2,1) convolution.

    Kernel layout [C_in, C_out, 2, 2, 1]. Kernel size equals stride, so every
    output voxel receives exactly one input contribution.
    """
    _require_5d("input", x)
    if kernel.ndim != 5 or kernel.shape[2:] != (2, 2, 1):
        raise ValueError(f"up-conv kernel must be [Cin,Cout,2,2,1], got {kernel.shape}")
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input shape {x.shape} has {x.shape[1]} channels, "
            f"kernel shape {kernel.shape} expects {kernel.shape[0]}")
    n, ci, xe, ye, ze = x.shape
    co = kernel.shape[1]
    out = np.empty((n, co, 2 * xe, 2 * ye, ze), dtype=x.dtype)
    for dx in range(2):
        for dy in range(2):
            tap = np.tensordot(kernel[:, :, dx, dy, 0], x, axes=(0, 1))
            out[:, :, dx::2, dy::2, :] = tap.transpose(1, 0, 2, 3, 4)
    out += bias.reshape(1, -1, 1, 1, 1)
    return out


def upconv_2x2x1_backward(x, kernel, grad_out):
    n, ci, xe, ye, ze = x.shape
    co = kernel.shape[1]
    if grad_out.shape != (n, co, 2 * xe, 2 * ye, ze):
        raise ValueError(f"grad_out shape {grad_out.shape}, expected "
                         f"{(n, co, 2 * xe, 2 * ye, ze)}")
    grad_input = np.zeros_like(x)
    grad_kernel = np.empty_like(kernel)
    for dx in range(2):
        for dy in range(2):
            sub = grad_out[:, :, dx::2, dy::2, :]
            tap = np.tensordot(kernel[:, :, dx, dy, 0], sub, axes=(1, 1))
            grad_input += tap.transpose(1, 0, 2, 3, 4)
            grad_kernel[:, :, dx, dy, 0] = np.tensordot(
                x, sub, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    return grad_input, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Channel concatenation
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    """Stack b's channels after a's; batch and spatial dims must match."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, channels_a):
    """Adjoint of concat_channels: split the gradient back into the two parts."""
    return grad_out[:, :channels_a].copy(), grad_out[:, channels_a:].copy()


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout(x, rate, seed, mode):
    """Inverted dropout. Returns (output, keep_mask); mask is None in infer mode.

    Train mode zeroes each value with probability `rate` and scales survivors
    by 1/(1-rate); infer mode is the bit-exact identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x.copy(), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return np.where(keep, x * scale, x.dtype.type(0)), keep


def dropout_backward(keep_mask, rate, grad_out):
    if keep_mask is None or rate == 0.0:
        return grad_out.copy()
    scale = grad_out.dtype.type(1.0 / (1.0 - rate))
    return np.where(keep_mask, grad_out * scale, grad_out.dtype.type(0))


# ---------------------------------------------------------------------------
# Channel softmax
# ---------------------------------------------------------------------------

def softmax_channels(x):
    """Per-voxel softmax over the channel axis, stabilized by max subtraction."""
    _require_5d("input", x)
    if x.shape[1] < 2:
        raise ValueError(f"softmax needs at least 2 channels, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(y, grad_out):
    """Jacobian-vector product given the forward output y."""
    inner = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - inner)
