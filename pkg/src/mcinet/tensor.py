"""Dense float64 tensor kernels.

Tensors are plain ``numpy.ndarray`` objects in N x C x H x W layout. This
module holds the numeric building blocks the layers share: GEMM, im2col /
col2im, convolution shape arithmetic, argmax and the ``.nt`` raw tensor file
format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

NT_MAGIC = b"NTSR"
NT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array extents are inconsistent with an operation."""


class TensorFileError(ValueError):
    """Raised for malformed ``.nt`` files."""


@dataclass(frozen=True)
class Shape2D:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"extents must be >= 1, got {self.height}x{self.width}")

    @classmethod
    def of(cls, value) -> "Shape2D":
        if isinstance(value, Shape2D):
            return value
        if isinstance(value, int):
            return cls(value, value)
        h, w = value
        return cls(int(h), int(w))

    def __iter__(self):
        return iter((self.height, self.width))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def gemm(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` for 2-D operands of shapes R x K and K x C."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv_out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if kernel < 1 or kernel > size + 2 * pad:
        raise ShapeError(
            f"kernel {kernel} does not fit input {size} with padding {pad}")
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
             fill: float = 0.0) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view over the padded input
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   constant_values=fill)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def im2col_batch(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Batched im2col: returns a (C*kh*kw) x (N*Ho*Wo) matrix.

    Rows run over (channel, ky, kx); columns over (sample, oy, ox), all
    row-major. Padding positions contribute zeros.
    """
    n, c, h, w = x.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    win = _windows(x, kh, kw, stride, pad)[:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def im2col(x, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Rearrange the receptive fields of a 1 x C x H x W tensor into columns."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"im2col expects a 1xCxHxW tensor, got {x.shape}")
    kh, kw = Shape2D.of(kernel)
    return im2col_batch(x, kh, kw, stride, pad)


def col2im_batch(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
                 pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`; overlapping windows accumulate."""
    n, c, h, w = x_shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for ky in range(kh):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(kw):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            out[:, :, ys, xs] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def argmax(v) -> int:
    """Index of the largest element; ties go to the lowest index."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("argmax of an empty vector")
    return int(np.argmax(v))


def save_nt(path, x) -> None:
    x = np.asarray(x, dtype="<f8")
    if x.ndim > 255:
        raise TensorFileError(f"rank {x.ndim} too large")
    header = NT_MAGIC + struct.pack("<BB", NT_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    Path(path).write_bytes(header + x.tobytes(order="C"))


def load_nt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != NT_MAGIC:
        raise TensorFileError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6:
        raise TensorFileError(f"{path}: truncated header")
    version, rank = raw[4], raw[5]
    if version != NT_VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    end = 6 + 4 * rank
    if len(raw) < end:
        raise TensorFileError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", raw[6:end])
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != end + 8 * count:
        raise TensorFileError(
            f"{path}: payload holds {len(raw) - end} bytes, expected {8 * count}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=end)
    return data.astype(DTYPE).reshape(shape)
