"""Dense tensor plumbing: deterministic matmul, emulated FP4 matmul,
seeded RNG, and the on-disk tensor formats.

Matrix multiplication accumulates strictly left-to-right over the
contraction index, in the requested width, so "bit-identical" claims about
the emulated FP4 path are meaningful. The emulated path accumulates one
microscaling block at a time (block-major order): within a block every
partial sum of decoded-code products is exactly representable, so the block
subtotal is exact and equals the element-by-element sum of the dequantized
values.
"""

from __future__ import annotations

import struct

import numpy as np

from .codec import QuantTensor, ScaleFormat, _decode_scales, decode_fp4, unpack_nibbles
from .errors import FormatError, ShapeError

_ACCUM_DTYPES = {32: np.float32, 64: np.float64}


def accum_dtype(accum_width):
    try:
        return _ACCUM_DTYPES[accum_width]
    except KeyError:
        raise ShapeError(f"accum_width must be 32 or 64, got {accum_width}")


def matmul(a, b, accum_width=32):
    """a @ b with fixed left-to-right summation over the contraction index.

    Both operands are converted to the accumulation width first. a may carry
    a leading batch axis; b is then shared across the batch.
    """
    dt = accum_dtype(accum_width)
    a = np.asarray(a, dtype=dt)
    b = np.asarray(b, dtype=dt)
    if a.ndim not in (2, 3) or b.ndim != 2:
        raise ShapeError("matmul expects a 2-D or 3-D left operand and 2-D right")
    k = a.shape[-1]
    if b.shape[0] != k:
        raise ShapeError(f"inner dims mismatch: {a.shape} x {b.shape}")
    out = np.zeros(a.shape[:-1] + (b.shape[1],), dtype=dt)
    tmp = np.empty_like(out)
    for kk in range(k):
        np.multiply(a[..., kk, None], b[kk], out=tmp)
        np.add(out, tmp, out=out)
    return out


def fp4mm(aq, bq_t, accum_width=32):
    """Emulated FP4 matrix multiply: A @ B from quantized operands.

    B is supplied pre-transposed (bq_t), so both operands are blocked along
    the shared contraction axis. Per block pair the dot product of decoded
    FP4 codes is scaled by the product of the two decoded block scales and
    accumulated in ascending block order. The result is bit-identical to
    matmul(dequantize(aq), dequantize(bq_t).T) at matched accumulation
    width whenever the cross-block additions are exact (always the case at
    64-bit on the magnitude ranges produced by these codecs).
    """
    if not isinstance(aq, QuantTensor) or not isinstance(bq_t, QuantTensor):
        raise ShapeError("fp4mm operands must be QuantTensors")
    if aq.spec != bq_t.spec:
        raise ShapeError("fp4mm operands must share a BlockSpec")
    if aq.cols != bq_t.cols:
        raise ShapeError(
            f"contraction axes differ: {aq.cols} vs {bq_t.cols}"
        )
    dt = accum_dtype(accum_width)
    bs = aq.spec.block_size
    a_codes = decode_fp4(unpack_nibbles(aq.codes, aq.cols))
    b_codes = decode_fp4(unpack_nibbles(bq_t.codes, bq_t.cols))
    a_scales = _decode_scales(aq.scales, aq.spec)
    b_scales = _decode_scales(bq_t.scales, bq_t.spec)
    out = np.zeros((aq.rows, bq_t.rows), dtype=dt)
    for jb in range(aq.cols // bs):
        sl = slice(jb * bs, (jb + 1) * bs)
        # exact in any order: code-product partial sums are all representable
        dots = a_codes[:, sl] @ b_codes[:, sl].T
        scaled = (a_scales[:, jb, None] * b_scales[None, :, jb]) * dots
        np.add(out, scaled.astype(dt), out=out)
    return out


class Rng:
    """Deterministic random stream: PCG64 with numpy's standard-normal.

    Same seed gives the same stream on every platform.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset):
        """Independent stream derived from this seed and an integer offset."""
        return Rng(self.seed * 0x9E3779B9 + offset & 0x7FFFFFFFFFFFFFFF)

    def standard_normal(self, dims, dtype=np.float64):
        return self._gen.standard_normal(size=dims).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high=high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)


def randn(dims, rng, scale=1.0, dtype=np.float64):
    """i.i.d. normal(0, scale^2) tensor from the pinned PRNG."""
    if scale <= 0:
        raise ShapeError("scale must be positive")
    return scale * rng.standard_normal(tuple(dims), dtype=dtype)


# --- on-disk formats -------------------------------------------------------

TENSOR_MAGIC = b"ATNQ"
QUANT_MAGIC = b"ATQ4"
_WIDTH_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_WIDTH_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(t, path):
    """Write a 1-3D float32/float64 tensor in the ATNQ format."""
    arr = np.ascontiguousarray(t)
    if arr.dtype not in _WIDTH_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 3:
        raise ShapeError("ATNQ stores 1-3 dimensional tensors")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IBB", 1, _WIDTH_CODES[arr.dtype], arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated while reading {what}", offset=f.tell())
    return data


def load_tensor(path):
    """Read an ATNQ tensor; roundtrips save_tensor bit-identically."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != TENSOR_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        version, width, ndim = struct.unpack("<IBB", _read_exact(f, 6, "header"))
        if version != 1:
            raise FormatError(f"unsupported version {version}", offset=4)
        if width not in _WIDTH_DTYPES:
            raise FormatError(f"unknown width code {width}", offset=8)
        if not 1 <= ndim <= 3:
            raise FormatError(f"bad ndim {ndim}", offset=9)
        dims = struct.unpack(
            "<" + "I" * ndim, _read_exact(f, 4 * ndim, "dims")
        )
        count = int(np.prod(dims))
        dt = _WIDTH_DTYPES[width]
        payload = _read_exact(f, count * dt.itemsize, "payload")
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after payload", offset=f.tell() - 1)
    out_dtype = np.float32 if width == 0 else np.float64
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(out_dtype)


def save_quant_tensor(qt, path):
    """Write a QuantTensor in the ATQ4 format (scale grid, packed nibbles)."""
    with open(path, "wb") as f:
        f.write(QUANT_MAGIC)
        f.write(
            struct.pack(
                "<IBHII",
                1,
                qt.spec.scale_format.value,
                qt.spec.block_size,
                qt.rows,
                qt.cols,
            )
        )
        f.write(np.ascontiguousarray(qt.scales).tobytes())
        f.write(np.ascontiguousarray(qt.codes).tobytes())


def load_quant_tensor(path):
    from .codec import BlockSpec  # avoid cycle at import time

    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != QUANT_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        version, fmt, bs, rows, cols = struct.unpack(
            "<IBHII", _read_exact(f, 15, "header")
        )
        if version != 1:
            raise FormatError(f"unsupported version {version}", offset=4)
        try:
            spec = BlockSpec(bs, ScaleFormat(fmt))
        except ValueError:
            raise FormatError(f"unknown scale format {fmt}", offset=8)
        n_scales = rows * (cols // bs)
        scales = np.frombuffer(
            _read_exact(f, n_scales, "scale grid"), dtype=np.uint8
        ).reshape(rows, cols // bs)
        codes = np.frombuffer(
            _read_exact(f, rows * cols // 2, "payload"), dtype=np.uint8
        ).reshape(rows, cols // 2)
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after payload", offset=f.tell() - 1)
    return QuantTensor(rows=rows, cols=cols, spec=spec, codes=codes.copy(), scales=scales.copy())
