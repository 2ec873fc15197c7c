"""Dense float64 kernels and seeded randomness.

Tensors are plain C-ordered ``numpy.ndarray`` objects of dtype float64. Every
function here is pure: inputs are never written to.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a module boundary."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    check_finite(arr, name)
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional tuple of stream keys.

    Keys may be ints or strings; the same (seed, keys) always yields the same
    stream, independent of platform.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernel must be square, got {w.shape[2:]}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride={stride} pad={pad}")
    k = w.shape[2]
    if k > x.shape[2] + 2 * pad or k > x.shape[3] + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {x.shape[2:]} (pad={pad})")


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation (no kernel flip) of a B×C×H×W batch with an O×C×k×k kernel."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w, stride, pad)
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0, input_grad: bool = True):
    """Gradients of ``conv2d(x, w)`` w.r.t. ``x`` and ``w`` given the output gradient.

    Returns ``(dx, dw)``; ``dx`` is None when ``input_grad`` is false.
    """
    _check_conv(x, w, stride, pad)
    o, c, k, _ = w.shape
    b = x.shape[0]
    cols, ho, wo = _im2col(x, k, stride, pad)
    if grad_out.shape != (b, o, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(b, o, ho, wo)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g.T @ cols).reshape(w.shape)
    if not input_grad:
        return None, dw
    dcols = (g @ w.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    dxp = np.zeros((b, c, hp, wp))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:hp - pad, pad:wp - pad] if pad else dxp
    return np.ascontiguousarray(dx), dw


def add(a, b) -> np.ndarray:
    return np.add(a, b, dtype=np.float64)


def mul(a, b) -> np.ndarray:
    return np.multiply(a, b, dtype=np.float64)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def exp(x) -> np.ndarray:
    return np.exp(np.asarray(x, dtype=np.float64))


def log(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return np.log(x)


def logsumexp(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def mean(x, axis=None) -> np.ndarray:
    return np.mean(np.asarray(x, dtype=np.float64), axis=axis)


def l2norm(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=axis))


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) == 0:
        raise DimensionError("shape must be nonempty")
    if len(shape) == 1:
        return int(shape[0])
    return int(np.prod(shape[1:]))


def kaiming_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """He-normal draw: N(0, 2 / fan_in) with fan_in = prod(shape[1:])."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"invalid shape {shape}")
    std = np.sqrt(2.0 / fan_in(shape))
    return rng.standard_normal(shape) * std
