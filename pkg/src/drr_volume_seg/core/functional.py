"""
Differentiable layer operations.

Convolutions are implemented once for any number of spatial axes: the forward
correlation gathers sliding windows (an implicit im2col) and contracts them
with the kernel in a single ``tensordot``; the adjoint scatters kernel-offset
products back into a padded buffer. Transposed convolution is the adjoint of
convolution, so the two share the same pair of kernels.
"""

import itertools
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .rng import RngState
from .tensor import Tensor

IntOrTuple = Union[int, Sequence[int]]


def _as_tuple(value: IntOrTuple, n: int, label: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    values = tuple(int(v) for v in value)
    if len(values) != n:
        raise ShapeError(f"{label} needs {n} values, got {values}")
    return values


# --------------------------------------------------------------- kernels


def _windows(xp: np.ndarray, kernel: tuple[int, ...], stride: tuple[int, ...]) -> np.ndarray:
    """Strided view ``(B, C, *out, *kernel)`` of all kernel windows of ``xp``."""
    n = len(kernel)
    view = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + n)))
    index = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return view[index]


def _correlate(xp: np.ndarray, w: np.ndarray, stride: tuple[int, ...]) -> np.ndarray:
    """y[b,o,p] = sum_{c,k} w[o,c,k] * xp[b,c,stride*p + k]."""
    n = w.ndim - 2
    win = _windows(xp, w.shape[2:], stride)
    out = np.tensordot(w, win, axes=([1] + list(range(2, 2 + n)), [1] + list(range(2 + n, 2 + 2 * n))))
    return np.moveaxis(out, 0, 1)


def _correlate_grad_weight(
    xp: np.ndarray, g: np.ndarray, kernel: tuple[int, ...], stride: tuple[int, ...]
) -> np.ndarray:
    """dW[o,c,k] = sum_{b,p} g[b,o,p] * xp[b,c,stride*p + k]."""
    n = len(kernel)
    win = _windows(xp, kernel, stride)
    out_shape = g.shape[2:]
    win = win[(slice(None), slice(None)) + tuple(slice(0, m) for m in out_shape)]
    spatial = list(range(2, 2 + n))
    return np.tensordot(g, win, axes=([0] + spatial, [0] + spatial))


def _scatter(g: np.ndarray, w: np.ndarray, stride: tuple[int, ...], target_spatial: tuple[int, ...]) -> np.ndarray:
    """
    Adjoint of ``_correlate`` with respect to its input.

    out[b,c,stride*p + k] += sum_o w[o,c,k] * g[b,o,p], into a zero buffer of
    spatial extent ``target_spatial``.
    """
    batch, channels = g.shape[0], w.shape[1]
    out = np.zeros((batch, channels) + tuple(target_spatial), dtype=np.result_type(g, w))
    positions = g.shape[2:]
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        contribution = np.tensordot(g, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
        contribution = np.moveaxis(contribution, -1, 1)
        region = (slice(None), slice(None)) + tuple(
            slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, positions)
        )
        out[region] += contribution
    return out


def _pad(x: np.ndarray, padding: tuple[int, ...]) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _unpad(x: np.ndarray, padding: tuple[int, ...]) -> np.ndarray:
    index = (slice(None), slice(None)) + tuple(slice(p, x.shape[2 + i] - p) for i, p in enumerate(padding))
    return x[index]


# ---------------------------------------------------------- convolutions


def _conv_nd(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: IntOrTuple,
    padding: Union[IntOrTuple, str],
    n: int,
    label: str,
) -> Tensor:
    if x.ndim != n + 2 or weight.ndim != n + 2:
        raise ShapeError(
            f"{label}: expected input rank {n + 2} and weight rank {n + 2}, "
            f"got input {x.shape} and weight {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"{label}: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    kernel = weight.shape[2:]
    stride_t = _as_tuple(stride, n, "stride")
    if padding == "same":
        if any(s != 1 for s in stride_t) or any(k % 2 == 0 for k in kernel):
            raise ShapeError(f"{label}: 'same' padding needs unit stride and odd kernel, got {kernel}")
        pad_t = tuple(k // 2 for k in kernel)
    else:
        pad_t = _as_tuple(padding, n, "padding")
    for axis, (extent, p, k) in enumerate(zip(x.shape[2:], pad_t, kernel)):
        if extent + 2 * p < k:
            raise ShapeError(
                f"{label}: spatial axis {axis} has extent {extent} (+2*{p} padding) smaller than kernel {k}"
            )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"{label}: bias shape {bias.shape} != ({weight.shape[0]},)")

    xp = _pad(x.data, pad_t)
    out = _correlate(xp, weight.data, stride_t)
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * n)
    padded_spatial = xp.shape[2:]

    def backward(g: np.ndarray):
        grad_x = None
        if x.requires_grad:
            grad_x = _unpad(_scatter(g, weight.data, stride_t, padded_spatial), pad_t)
        grad_w = _correlate_grad_weight(xp, g, kernel, stride_t) if weight.requires_grad else None
        grad_b = None
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0,) + tuple(range(2, 2 + n)))
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTuple = 1,
    padding: Union[IntOrTuple, str] = "same",
) -> Tensor:
    """
    3D cross-correlation.

    Args:
        x: Input ``[B, Cin, D, H, W]``.
        weight: Kernel ``[Cout, Cin, kd, kh, kw]``.
        bias: Optional ``[Cout]``.
        stride: Per-axis stride.
        padding: Per-axis zero padding or ``"same"`` (unit stride, odd kernel).

    Raises:
        ShapeError: On rank, channel or extent mismatch.
    """
    return _conv_nd(x, weight, bias, stride, padding, 3, "conv3d")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTuple = 1,
    padding: Union[IntOrTuple, str] = "same",
) -> Tensor:
    """2D cross-correlation; see ``conv3d``."""
    return _conv_nd(x, weight, bias, stride, padding, 2, "conv2d")


def transposed_output_shape(
    spatial: Sequence[int],
    kernel: Sequence[int],
    stride: Sequence[int],
    padding: Sequence[int],
    output_padding: Sequence[int],
) -> tuple[int, ...]:
    """(in - 1) * stride - 2 * pad + kernel + output_padding per axis."""
    return tuple(
        (n - 1) * s - 2 * p + k + op
        for n, k, s, p, op in zip(spatial, kernel, stride, padding, output_padding)
    )


def _conv_transpose_nd(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: IntOrTuple,
    padding: IntOrTuple,
    output_padding: IntOrTuple,
    n: int,
    label: str,
) -> Tensor:
    if x.ndim != n + 2 or weight.ndim != n + 2:
        raise ShapeError(f"{label}: expected rank {n + 2}, got input {x.shape} and weight {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"{label}: input has {x.shape[1]} channels but weight expects {weight.shape[0]}")
    kernel = weight.shape[2:]
    stride_t = _as_tuple(stride, n, "stride")
    pad_t = _as_tuple(padding, n, "padding")
    out_pad_t = _as_tuple(output_padding, n, "output_padding")
    for axis, (s, op) in enumerate(zip(stride_t, out_pad_t)):
        if op < 0 or op >= s:
            raise ShapeError(
                f"{label}: output_padding {op} on axis {axis} must satisfy 0 <= output_padding < stride {s}"
            )
    out_spatial = transposed_output_shape(x.shape[2:], kernel, stride_t, pad_t, out_pad_t)
    if any(m <= 0 for m in out_spatial):
        raise ShapeError(f"{label}: non-positive output extent {out_spatial}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"{label}: bias shape {bias.shape} != ({weight.shape[1]},)")

    # Full (uncropped) buffer; grows by the output padding that exceeds the crop.
    full = tuple(
        max((m - 1) * s + k, p + o)
        for m, s, k, p, o in zip(x.shape[2:], stride_t, kernel, pad_t, out_spatial)
    )
    crop = (slice(None), slice(None)) + tuple(slice(p, p + o) for p, o in zip(pad_t, out_spatial))
    out = _scatter(x.data, weight.data, stride_t, full)[crop]
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * n)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        g_full = np.zeros((g.shape[0], g.shape[1]) + full, dtype=g.dtype)
        g_full[crop] = g
        in_spatial = x.shape[2:]
        grad_x = None
        if x.requires_grad:
            grad_x = _correlate(g_full, weight.data, stride_t)
            grad_x = grad_x[(slice(None), slice(None)) + tuple(slice(0, m) for m in in_spatial)]
            grad_x = np.ascontiguousarray(grad_x)
        grad_w = None
        if weight.requires_grad:
            win = _windows(g_full, kernel, stride_t)
            win = win[(slice(None), slice(None)) + tuple(slice(0, m) for m in in_spatial)]
            spatial = list(range(2, 2 + n))
            grad_w = np.tensordot(x.data, win, axes=([0] + spatial, [0] + spatial))
        grad_b = None
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0,) + tuple(range(2, 2 + n)))
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv_transpose3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTuple = 1,
    padding: IntOrTuple = 0,
    output_padding: IntOrTuple = 0,
) -> Tensor:
    """
    3D transposed convolution (gradient-of-convolution semantics).

    Args:
        x: Input ``[B, Cin, D, H, W]``.
        weight: Kernel ``[Cin, Cout, kd, kh, kw]``.
        stride: Per-axis stride; the depth stride may exceed in-plane strides.
        padding: Per-axis crop applied to both sides of the full output.
        output_padding: Extra extent on the high side of each axis.

    Returns:
        Tensor with spatial extents ``(in-1)*stride - 2*pad + kernel + output_padding``.

    Raises:
        ShapeError: If ``output_padding`` is not smaller than the stride on an axis,
            or on rank/channel mismatch.
    """
    return _conv_transpose_nd(x, weight, bias, stride, padding, output_padding, 3, "conv_transpose3d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTuple = 1,
    padding: IntOrTuple = 0,
    output_padding: IntOrTuple = 0,
) -> Tensor:
    """2D transposed convolution; see ``conv_transpose3d``."""
    return _conv_transpose_nd(x, weight, bias, stride, padding, output_padding, 2, "conv_transpose2d")


# --------------------------------------------------------------- pooling


def _max_pool_nd(x: Tensor, window: IntOrTuple, n: int, label: str) -> Tensor:
    win = _as_tuple(window, n, "window")
    if x.ndim != n + 2:
        raise ShapeError(f"{label}: expected rank {n + 2}, got {x.shape}")
    for axis, (extent, w) in enumerate(zip(x.shape[2:], win)):
        if extent % w:
            raise ShapeError(f"{label}: spatial axis {axis} extent {extent} is not divisible by window {w}")

    batch, channels = x.shape[:2]
    pooled = tuple(e // w for e, w in zip(x.shape[2:], win))
    split = x.data.reshape((batch, channels) + tuple(v for pair in zip(pooled, win) for v in pair))
    # (B, C, p0, w0, p1, w1, ...) -> (B, C, p0, p1, ..., w0 * w1 * ...)
    order = (0, 1) + tuple(2 + 2 * i for i in range(n)) + tuple(3 + 2 * i for i in range(n))
    blocks = split.transpose(order).reshape((batch, channels) + pooled + (-1,))
    # argmax returns the first maximum: ties go to the lowest linear index in the window.
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape((batch, channels) + pooled + win)
        inverse = np.argsort(order)
        routed = routed.transpose(inverse).reshape(x.shape)
        return (routed,)

    return Tensor.from_op(out, (x,), backward)


def maxpool3d(x: Tensor, window: IntOrTuple = 2) -> Tensor:
    """
    Non-overlapping max pooling (window == stride), default 2x2x2.

    Raises:
        ShapeError: If a spatial extent is not divisible by the window.
    """
    return _max_pool_nd(x, window, 3, "maxpool3d")


def maxpool2d(x: Tensor, window: IntOrTuple = 2) -> Tensor:
    """Non-overlapping 2D max pooling; see ``maxpool3d``."""
    return _max_pool_nd(x, window, 2, "maxpool2d")


# ------------------------------------------------------------ activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,))


# --------------------------------------------------------------- dropout


def dropout(x: Tensor, p: float, rng: Optional[RngState], active: bool) -> Tensor:
    """
    Inverted dropout.

    When active, each element is zeroed with probability ``p`` and survivors are
    scaled by ``1/(1-p)``; when inactive (or ``p == 0``) this is the identity.

    Raises:
        ValueError: If ``p`` is outside ``[0, 1)``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout requires an RngState")
    keep = rng.uniform(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def dropblock_mask(
    shape: tuple[int, ...], block_size: int, drop_rate: float, rng: RngState
) -> np.ndarray:
    """
    Binary keep-mask for ``dropblock3d``.

    Seed sites are drawn only where a full cubic block fits, with the seed rate
    corrected so that the expected dropped fraction is close to ``drop_rate``.
    """
    batch, channels = shape[:2]
    spatial = shape[2:]
    valid = tuple(e - block_size + 1 for e in spatial)
    if any(v <= 0 for v in valid):
        raise ShapeError(f"dropblock3d: block_size {block_size} exceeds spatial extents {spatial}")
    gamma = drop_rate / block_size**3 * np.prod(spatial) / np.prod(valid)
    seeds = rng.uniform((batch, channels) + valid) < gamma
    dropped = np.zeros(shape, dtype=bool)
    for offset in itertools.product(range(block_size), repeat=3):
        region = (slice(None), slice(None)) + tuple(slice(o, o + v) for o, v in zip(offset, valid))
        dropped[region] |= seeds
    return ~dropped


def dropblock3d(
    x: Tensor, block_size: int, drop_rate: float, rng: Optional[RngState], active: bool
) -> Tensor:
    """
    Structured dropout removing contiguous ``block_size``^3 cubes.

    Survivors are rescaled by ``numel / kept`` so the expected activation sum
    is preserved. Identity when inactive or ``drop_rate == 0``.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if x.ndim != 5:
        raise ShapeError(f"dropblock3d: expected rank 5, got {x.shape}")
    if not active or drop_rate == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropblock requires an RngState")
    keep = dropblock_mask(x.shape, block_size, drop_rate, rng)
    kept = int(keep.sum())
    scale = x.data.size / kept if kept else 0.0
    mask = keep.astype(x.dtype) * np.asarray(scale, dtype=x.dtype)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------- shape helpers


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not tensors:
        raise ShapeError("concat: empty input")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, reference)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {reference} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the channel axis into consecutive chunks."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g: np.ndarray, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        out.append(Tensor.from_op(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward))
        start = hi
    return out


def expand_depth(x: Tensor, depth: int, scale: float = 1.0) -> Tensor:
    """
    Replicate a ``[B, C, H, W]`` map along a new depth axis: ``[B, C, depth, H, W]``.

    Every depth slice equals ``scale * x``.
    """
    if x.ndim != 4:
        raise ShapeError(f"expand_depth: expected rank 4, got {x.shape}")
    if depth < 1:
        raise ShapeError(f"expand_depth: depth must be >= 1, got {depth}")
    factor = np.asarray(scale, dtype=x.dtype)
    out = np.repeat((x.data * factor)[:, :, None], depth, axis=2)
    return Tensor.from_op(out, (x,), lambda g: (g.sum(axis=2) * factor,))


def mean_depth(x: Tensor) -> Tensor:
    """Average a ``[B, C, D, H, W]`` volume over depth -> ``[B, C, H, W]``."""
    if x.ndim != 5:
        raise ShapeError(f"mean_depth: expected rank 5, got {x.shape}")
    depth = x.shape[2]
    inv = np.asarray(1.0 / depth, dtype=x.dtype)

    def backward(g: np.ndarray):
        return (np.repeat(g[:, :, None] * inv, depth, axis=2),)

    return Tensor.from_op(x.data.mean(axis=2), (x,), backward)


def slice_batch(x: Tensor, index: int) -> Tensor:
    """Select one batch item, keeping the batch axis (``[1, ...]``)."""

    def backward(g: np.ndarray):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index : index + 1] = g
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index : index + 1]), (x,), backward)
