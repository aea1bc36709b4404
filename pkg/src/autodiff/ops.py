"""
Differentiable Operations

The fixed operation set used by the models and losses. Every operation
accepts constants or taped tensors; results land on the operands' tape when
there is one. No broadcasting beyond the bias term of ``affine``.
"""

from typing import Any, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autodiff.tape import (
    ContractError,
    DimensionError,
    Tensor,
    VJP,
    tape_of,
)


def _emit(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    vjp: VJP,
    saved: Tuple[Any, ...] = (),
) -> Tensor:
    tape = tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, vjp, saved)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} must match exactly"
        )


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """
    Batched affine map ``x @ W + b``.

    Args:
        x: Input of shape (B, d_in)
        W: Weights of shape (d_in, d_out)
        b: Bias of shape (d_out,)

    Raises:
        DimensionError: If the inner dimensions or bias length disagree
    """
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(
            f"affine: input shape {x.shape} incompatible with weight shape {W.shape}"
        )
    if b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine: bias shape {b.shape} incompatible with weight shape {W.shape}"
        )

    out = x.data @ W.data + b.data

    def vjp(g, saved):
        x_val, w_val = saved
        return g @ w_val.T, x_val.T @ g, g.sum(axis=0)

    return _emit("affine", (x, W, b), out, vjp, (x.data, W.data))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g, saved):
        (m,) = saved
        return (g * m,)

    return _emit("relu", (x,), out, vjp, (mask,))


def conv2d(x: Tensor, k: Tensor, padding: str = "same") -> Tensor:
    """
    Stride-1 cross-correlation (no kernel flip).

    Args:
        x: Input of shape (B, C, H, W)
        k: Kernels of shape (F, C, kh, kw) with odd kh, kw
        padding: 'same' (zero-padded, output H x W) or 'valid'

    Raises:
        DimensionError: On channel mismatch or a kernel larger than the
            padded input
        ContractError: On even kernel sizes or unknown padding
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-D input and kernel, got {x.shape} and {k.shape}"
        )
    _, channels, height, width = x.shape
    filters, k_channels, kh, kw = k.shape
    if channels != k_channels:
        raise DimensionError(
            f"conv2d: input shape {x.shape} has {channels} channels, "
            f"kernel shape {k.shape} expects {k_channels}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph, pw = 0, 0
    else:
        raise ContractError(f"conv2d: unknown padding '{padding}'")
    if kh > height + 2 * ph or kw > width + 2 * pw:
        raise DimensionError(
            f"conv2d: kernel shape {k.shape} larger than padded input shape {x.shape}"
        )

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (B, C, H', W', kh, kw)
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,fcij->bfhw", windows, k.data)

    def vjp(g, saved):
        win, kernel, padded_shape = saved
        grad_k = np.einsum("bchwij,bfhw->fcij", win, g)
        grad_padded = np.zeros(padded_shape)
        out_h, out_w = g.shape[2], g.shape[3]
        for i in range(kernel.shape[2]):
            for j in range(kernel.shape[3]):
                grad_padded[:, :, i : i + out_h, j : j + out_w] += np.einsum(
                    "bfhw,fc->bchw", g, kernel[:, :, i, j]
                )
        grad_x = grad_padded[
            :, :, ph : padded_shape[2] - ph, pw : padded_shape[3] - pw
        ]
        return grad_x, grad_k

    return _emit(
        "conv2d", (x, k), out, vjp, (windows, k.data, padded.shape)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    height, width = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def vjp(g, saved):
        (shape,) = saved
        spread = np.broadcast_to(g[:, :, None, None], shape)
        return (spread / (height * width),)

    return _emit("global_avg_pool", (x,), out, vjp, (x.shape,))


def flatten(x: Tensor) -> Tensor:
    """Collapse every non-batch dimension: (B, ...) -> (B, d)."""
    out = x.data.reshape(x.shape[0], -1)

    def vjp(g, saved):
        (shape,) = saved
        return (g.reshape(shape),)

    return _emit("flatten", (x,), out, vjp, (x.shape,))


def log_softmax(z: Tensor) -> Tensor:
    """
    Row-wise log-softmax with max subtraction.

    out[i, k] = z[i, k] - m_i - log(sum_l exp(z[i, l] - m_i)), m_i = max_l z[i, l]
    """
    if z.data.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(
            f"log_softmax: expected shape (B, K) with K >= 2, got {z.shape}"
        )
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g, saved):
        (log_p,) = saved
        return (g - np.exp(log_p) * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", (z,), out, vjp, (out,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def vjp(g, saved):
        return g, g

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def vjp(g, saved):
        return g, -g

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)

    def vjp(g, saved):
        a_val, b_val = saved
        return g * b_val, g * a_val

    return _emit("mul", (a, b), a.data * b.data, vjp, (a.data, b.data))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    factor = float(factor)

    def vjp(g, saved):
        return (g * factor,)

    return _emit("scale", (a,), a.data * factor, vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g, saved):
        (e,) = saved
        return (g * e,)

    return _emit("exp", (a,), out, vjp, (out,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of every entry as a 0-d tensor."""

    def vjp(g, saved):
        (shape,) = saved
        return (np.full(shape, float(g)),)

    return _emit("sum", (a,), np.array(a.data.sum()), vjp, (a.shape,))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def pick(a: Tensor, labels: Sequence[int]) -> Tensor:
    """Gather ``a[i, labels[i]]`` for every row: (B, K) -> (B,)."""
    index = np.asarray(labels, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(
            f"pick: labels of shape {index.shape} do not index rows of {a.shape}"
        )
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def vjp(g, saved):
        shape, idx = saved
        grad = np.zeros(shape)
        grad[np.arange(shape[0]), idx] = g
        return (grad,)

    return _emit("pick", (a,), out, vjp, (a.shape, index))


def take(a: Tensor, position: Tuple[int, ...]) -> Tensor:
    """Select one entry as a 0-d tensor."""
    position = tuple(int(p) for p in position)
    if len(position) != a.data.ndim:
        raise ContractError(f"take: position {position} does not match shape {a.shape}")

    def vjp(g, saved):
        shape, pos = saved
        grad = np.zeros(shape)
        grad[pos] = g
        return (grad,)

    return _emit("take", (a,), np.array(a.data[position]), vjp, (a.shape, position))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full inner product of two same-shape tensors."""
    return sum_all(mul(a, b))
