"""Dense tensor primitives: convolution, pooling, affine maps, and their adjoints.

Tensors are plain row-major numpy arrays of real floats. Spatial convolution
uses the cross-correlation convention (no kernel flip) with stride fixed at 1;
``conv2d_transpose`` is its exact adjoint, and ``unpool2`` is the adjoint of
``maxpool2`` for a fixed set of argmax indices. Inputs may carry an optional
leading batch axis; outputs match the rank of the input.

All functions are pure (inputs never mutated) and deterministic: accumulation
happens in float64 via ``np.einsum`` with a fixed contraction order, so
identical inputs give bit-identical outputs regardless of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axis."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: square kernel, stride fixed at 1."""

    in_channels: int
    out_channels: int
    kernel: int
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def out_extent(self, extent: int) -> int:
        out = extent + 2 * self.padding - self.kernel + 1
        if out < 1:
            raise ShapeError(
                f"conv output extent {out} < 1 for input extent {extent} "
                f"(kernel {self.kernel}, padding {self.padding})"
            )
        return out


def _as_batch(x: np.ndarray, rank: int, what: str):
    """Return (batched array, had_batch_axis). `rank` is the unbatched rank."""
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeError(f"{what}: expected rank {rank} or {rank + 1}, got rank {x.ndim}")


def _einsum(subscripts, *operands, dtype):
    # float64 accumulation, cast back to the carrier dtype
    out = np.einsum(subscripts, *operands, dtype=np.float64)
    return out.astype(dtype, copy=False)


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate x[C_in,H,W] (or [B,C_in,H,W]) with w[C_out,C_in,k,k].

    y[o,i,j] = sum_{c,a,b} w[o,c,a,b] * x_padded[c,i+a,j+b]
    """
    xb, batched = _as_batch(x, 3, "conv2d input")
    w = np.asarray(w)
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel: expected rank 4, got rank {w.ndim}")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeError(
            f"conv2d kernel shape {w.shape} does not match spec "
            f"({spec.out_channels},{spec.in_channels},{spec.kernel},{spec.kernel})"
        )
    if xb.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input channel axis has extent {xb.shape[1]}, spec expects {spec.in_channels}"
        )
    spec.out_extent(xb.shape[2])
    spec.out_extent(xb.shape[3])

    p = spec.padding
    if p:
        xb = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xb, (spec.kernel, spec.kernel), axis=(2, 3))
    dtype = np.result_type(x, w)
    y = _einsum("ocab,ncijab->noij", w, win, dtype=dtype)
    return y if batched else y[0]


def conv2d_transpose(g: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Exact adjoint of conv2d: <conv2d(x,w), g> == <x, conv2d_transpose(g,w)>."""
    gb, batched = _as_batch(g, 3, "conv2d_transpose input")
    w = np.asarray(w)
    if gb.shape[1] != spec.out_channels:
        raise ShapeError(
            f"conv2d_transpose input channel axis has extent {gb.shape[1]}, "
            f"spec expects {spec.out_channels}"
        )
    # Adjoint = cross-correlation with the channel-swapped, spatially flipped
    # kernel at padding k-1-p; negative padding means cropping g instead.
    q = spec.kernel - 1 - spec.padding
    if q < 0:
        c = -q
        if gb.shape[2] <= 2 * c or gb.shape[3] <= 2 * c:
            raise ShapeError(
                f"conv2d_transpose input spatial extent {gb.shape[2:]} too small "
                f"for padding {spec.padding} (kernel {spec.kernel})"
            )
        gb = gb[:, :, c:-c, c:-c]
        q = 0
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    tspec = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, q)
    y = conv2d(gb, wt, tspec)
    return y if batched else np.asarray(y)


def conv2d_weight_grad(x: np.ndarray, u: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of <u, conv2d(x, w)> with respect to w, summed over the batch.

    u must be shaped like the conv2d output for x under spec.
    """
    xb, _ = _as_batch(x, 3, "conv2d_weight_grad input")
    ub, _ = _as_batch(u, 3, "conv2d_weight_grad upstream")
    if ub.shape[0] != xb.shape[0]:
        raise ShapeError("conv2d_weight_grad: batch axes differ")
    p = spec.padding
    if p:
        xb = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xb, (spec.kernel, spec.kernel), axis=(2, 3))
    dtype = np.result_type(x, u)
    return _einsum("noij,ncijab->ocab", ub, win, dtype=dtype)


def maxpool2(x: np.ndarray):
    """2x2 stride-2 max pooling. Returns (pooled, indices).

    indices[...,i,j] is the flat row-major index into the [H,W] plane of the
    argmax of window (i,j); ties break toward the lowest flat index.
    """
    xb, batched = _as_batch(x, 3, "maxpool2 input")
    B, C, H, W = xb.shape
    if H % 2 or W % 2:
        raise ShapeError(
            f"maxpool2 needs even spatial extents, got {H}x{W}; pad the input first"
        )
    # candidate order (0,0),(0,1),(1,0),(1,1) == ascending flat index per window
    cand = np.stack(
        [xb[:, :, 0::2, 0::2], xb[:, :, 0::2, 1::2],
         xb[:, :, 1::2, 0::2], xb[:, :, 1::2, 1::2]],
        axis=-1,
    )
    slot = np.argmax(cand, axis=-1)
    pooled = np.take_along_axis(cand, slot[..., None], axis=-1)[..., 0]
    rows = np.arange(0, H, 2)[:, None] + slot // 2
    cols = np.arange(0, W, 2)[None, :] + slot % 2
    idx = rows * W + cols
    if not batched:
        return pooled[0], idx[0]
    return pooled, idx


def unpool2(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Adjoint of maxpool2 for fixed indices: scatter g to its argmax cells."""
    gb, batched = _as_batch(g, 3, "unpool2 input")
    ib, _ = _as_batch(idx, 3, "unpool2 indices")
    if gb.shape != ib.shape:
        raise ShapeError(f"unpool2: value shape {gb.shape} != index shape {ib.shape}")
    B, C, h, w = gb.shape
    H, W = 2 * h, 2 * w
    flat_idx = ib.reshape(B, C, h * w)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= H * W):
        raise ValueError(
            f"unpool2: corrupted pool indices outside [0, {H * W}) "
            f"(min {flat_idx.min()}, max {flat_idx.max()})"
        )
    out = np.zeros((B, C, H * W), dtype=gb.dtype)
    np.put_along_axis(out, flat_idx, gb.reshape(B, C, h * w), axis=2)
    out = out.reshape(B, C, H, W)
    return out if batched else out[0]


def pool_gather(y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Adjoint of unpool2: gather y at the recorded argmax indices.

    Equivalent to routing y through the pooling pattern that produced idx.
    """
    yb, batched = _as_batch(y, 3, "pool_gather input")
    ib, _ = _as_batch(idx, 3, "pool_gather indices")
    B, C, H, W = yb.shape
    h, w = ib.shape[2], ib.shape[3]
    picked = np.take_along_axis(yb.reshape(B, C, H * W), ib.reshape(B, C, h * w), axis=2)
    out = picked.reshape(B, C, h, w)
    return out if batched else out[0]


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = w @ x + b for x[D] or batched x[B,D]."""
    xb, batched = _as_batch(x, 1, "affine input")
    w = np.asarray(w)
    b = np.asarray(b)
    if w.ndim != 2:
        raise ShapeError(f"affine weight: expected rank 2, got rank {w.ndim}")
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(
            f"affine: input axis has extent {xb.shape[1]}, weight expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias shape {b.shape} != ({w.shape[0]},)")
    dtype = np.result_type(x, w, b)
    y = _einsum("kd,bd->bk", w, xb, dtype=dtype) + b
    return y if batched else y[0]


def hard_clamp(x: np.ndarray) -> np.ndarray:
    """Elementwise min(max(x, 0), 1)."""
    return np.clip(x, 0.0, 1.0)
