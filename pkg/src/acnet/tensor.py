"""Dense 4-axis tensors, exact 2D convolution and kernel geometry.

Tensors are plain ``numpy`` arrays laid out as (batch, channels, height, width).
Convolution is cross-correlation with zero padding.  Every forward output
value is accumulated sequentially in c-major, then kh, then kw order by a
compiled loop, so results are bit-reproducible no matter how the (batch,
filter) pairs are scheduled across threads.  Gradients go through BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange
from numpy.lib.stride_tricks import sliding_window_view

# the bundled TBB is too old for numba; the workqueue layer is always present
numba.config.THREADING_LAYER = "workqueue"

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when array extents do not satisfy an operation's preconditions."""


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-axis (n, c, h, w) tensor, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        sh, sw = self.stride
        ph, pw = self.padding
        if sh < 1 or sw < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if ph < 0 or pw < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def output_extent(self, h: int, w: int, kh: int, kw: int) -> tuple[int, int]:
        """Output (rows, cols) for an ``h`` x ``w`` input and ``kh`` x ``kw`` kernel."""
        (sh, sw), (ph, pw) = self.stride, self.padding
        num_r = h + 2 * ph - kh
        num_t = w + 2 * pw - kw
        if num_r < 0:
            raise ShapeError(
                f"degenerate output height: input height {h} + 2*{ph} padding < kernel height {kh}"
            )
        if num_t < 0:
            raise ShapeError(
                f"degenerate output width: input width {w} + 2*{pw} padding < kernel width {kw}"
            )
        return num_r // sh + 1, num_t // sw + 1


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Convolution weights of shape (d, c, h, w) with an optional length-d bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"filter weights must be (d, c, h, w), got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias of shape {self.bias.shape} does not match {self.weights.shape[0]} filters"
            )

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def c(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def astype(self, dtype) -> FilterBank:
        bias = None if self.bias is None else self.bias.astype(dtype)
        return FilterBank(self.weights.astype(dtype), bias)


# Compiled forward kernel.  Each output value receives its c-major, kh, kw
# products in sequence.  Four filters share every input row load, and the
# innermost loop runs across output columns only, so neither the blocking nor
# vectorization reorders any sum.


@njit(parallel=True, cache=True)
def _conv_forward(xp, w, sh, sw, out):
    n_batch, n_filt, n_r, n_t = out.shape
    n_c, n_kh, n_kw = w.shape[1], w.shape[2], w.shape[3]
    n_blk = (n_filt + 3) // 4
    for nb in prange(n_batch * n_blk):
        n = nb // n_blk
        d0 = (nb % n_blk) * 4
        nd = min(4, n_filt - d0)
        acc = np.zeros((4, n_t), dtype=out.dtype)
        for i in range(n_r):
            acc[:, :] = 0
            for c in range(n_c):
                for kh in range(n_kh):
                    src = xp[n, c, i * sh + kh]
                    for kw in range(n_kw):
                        if nd == 4:
                            w0 = w[d0, c, kh, kw]
                            w1 = w[d0 + 1, c, kh, kw]
                            w2 = w[d0 + 2, c, kh, kw]
                            w3 = w[d0 + 3, c, kh, kw]
                            for j in range(n_t):
                                v = src[j * sw + kw]
                                acc[0, j] += w0 * v
                                acc[1, j] += w1 * v
                                acc[2, j] += w2 * v
                                acc[3, j] += w3 * v
                        else:
                            for k in range(nd):
                                wv = w[d0 + k, c, kh, kw]
                                for j in range(n_t):
                                    acc[k, j] += wv * src[j * sw + kw]
            for k in range(nd):
                out[n, d0 + k, i, :] = acc[k]


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _check_conv(x: np.ndarray, weights: np.ndarray, geom: ConvGeometry) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-axis input, got shape {x.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]} channels, filters expect {weights.shape[1]}"
        )
    return geom.output_extent(x.shape[2], x.shape[3], weights.shape[2], weights.shape[3])


def conv2d(x: np.ndarray, filters: FilterBank, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """Cross-correlate ``x`` (n, c, h, w) with ``filters``; returns (n, d, r, t)."""
    x = as_tensor(x)
    weights = np.ascontiguousarray(filters.weights, dtype=x.dtype)
    n_r, n_t = _check_conv(x, weights, geom)
    out = np.zeros((x.shape[0], weights.shape[0], n_r, n_t), dtype=x.dtype)
    _conv_forward(_pad(x, *geom.padding), weights, geom.stride[0], geom.stride[1], out)
    if filters.bias is not None:
        out += filters.bias.astype(x.dtype)[None, :, None, None]
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(n, c, r, t, kh, kw) strided view of every sliding window of ``xp``."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def conv2d_grad_weights(x: np.ndarray, grad_out: np.ndarray, kernel_size, geom: ConvGeometry):
    """Gradient of a convolution w.r.t. its weights, shape (d, c, kh, kw)."""
    kh, kw = kernel_size
    cols = _windows(_pad(x, *geom.padding), kh, kw, *geom.stride)
    n_r, n_t = grad_out.shape[2:]
    cols = cols[:, :, :n_r, :n_t]
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)


def conv2d_grad_input(grad_out: np.ndarray, weights: np.ndarray, in_shape, geom: ConvGeometry):
    """Gradient of a convolution w.r.t. its (unpadded) input."""
    n, c, h, w = in_shape
    (ph, pw), (sh, sw) = geom.padding, geom.stride
    kh, kw = weights.shape[2:]
    n_r, n_t = grad_out.shape[2:]
    # (n, r, t, c, kh, kw): each window's share of the input gradient
    gcols = np.tensordot(grad_out, weights.astype(grad_out.dtype), axes=([1], [0]))
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a:a + sh * (n_r - 1) + 1:sh, b:b + sw * (n_t - 1) + 1:sw] += gcols[:, :, a, b]
    return gxp[:, :, ph:ph + h, pw:pw + w]


def shift2d(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Return ``y`` with ``y[..., r, c] = x[..., r + dy, c + dx]``, zero outside ``x``."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_r = slice(max(dy, 0), h + min(dy, 0))
    dst_r = slice(max(-dy, 0), h + min(-dy, 0))
    src_c = slice(max(dx, 0), w + min(dx, 0))
    dst_c = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def embed_kernel(small, target_h: int, target_w: int, row_off: int, col_off: int) -> np.ndarray:
    """Place ``small`` inside a zero kernel of extent ``target_h`` x ``target_w``.

    Only the last two axes are spatial; leading axes (filters, channels) are
    carried through, so a whole (d, c, 1, 3) bank can be embedded at once.
    """
    small = np.asarray(small)
    h, w = small.shape[-2:]
    if row_off < 0 or col_off < 0 or row_off + h > target_h or col_off + w > target_w:
        raise ShapeError(
            f"cannot embed a {h}x{w} kernel at ({row_off}, {col_off}) in {target_h}x{target_w}"
        )
    out = np.zeros(small.shape[:-2] + (target_h, target_w), dtype=small.dtype)
    out[..., row_off:row_off + h, col_off:col_off + w] = small
    return out


def kernel_add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"kernel extents differ: {a.shape} vs {b.shape}")
    return a + b


def rot90(x: np.ndarray) -> np.ndarray:
    """Counterclockwise quarter turn of the spatial axes."""
    return np.ascontiguousarray(np.rot90(x, 1, axes=(-2, -1)))


def rot180(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(x, 2, axes=(-2, -1)))


def flip_ud(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1, :])


def flip_lr(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., :, ::-1])
