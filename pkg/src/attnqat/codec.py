"""Bit-exact E2M1 / E4M3 / E8M0 codecs and the block quantization operator.

FP4 (E2M1) values live in a 16-entry table indexed by the 4-bit code
(sign << 3 | exp << 1 | mantissa). E4M3 follows the "fn" convention: no
infinities, codes 0x7F/0xFF are NaN, max finite is 448. E8M0 is an unsigned
power-of-two exponent, code 0xFF is NaN.

Rounding is round-to-nearest with ties to the even mantissa bit everywhere
(the satfinite/rn convert behaviour); values past the top of a format
saturate to its max finite magnitude.

A quantized block is block_size FP4 codes sharing one 8-bit scale. The raw
scale max|x|/6 is rounded to its 8-bit format first and elements are divided
by the *decoded* scale, so emulated FP4 matmul on the stored codes agrees
exactly with matmul on the dequantized values.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidValue, ShapeError

FP4_MAX = 6.0
E4M3_MAX = 448.0

# Positive half of the E2M1 value set, indexed by code 0..7.
# Codes 8..15 are the negatives; 0b1000 is negative zero.
_FP4_POS = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
FP4_DECODE = np.concatenate([_FP4_POS, -_FP4_POS])
# Midpoints between consecutive positive values; exact in binary.
_FP4_MIDS = (_FP4_POS[:-1] + _FP4_POS[1:]) / 2.0


def _build_e4m3_table():
    vals = np.empty(256)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        mant = code & 0x7
        if exp == 0xF and mant == 0x7:
            vals[code] = np.nan  # 0x7F / 0xFF
        elif exp == 0:
            vals[code] = sign * (mant / 8.0) * 2.0**-6  # subnormal
        else:
            vals[code] = sign * (1.0 + mant / 8.0) * 2.0 ** (exp - 7)
    return vals


E4M3_DECODE = _build_e4m3_table()
# Non-negative finite values ascend with the code (0 .. 0x7E).
_E4M3_POS = E4M3_DECODE[: 0x7F]
_E4M3_MIDS = (_E4M3_POS[:-1] + _E4M3_POS[1:]) / 2.0
E4M3_MIN_SUBNORMAL = _E4M3_POS[1]  # 2**-9

E8M0_DECODE = np.array([2.0 ** (b - 127) for b in range(255)] + [np.nan])
E8M0_NAN = 0xFF


def _round_even(x, mids):
    """Nearest index into an ascending value table, ties to even index."""
    x = np.atleast_1d(x)
    lo = np.searchsorted(mids, x, side="left")
    hi = np.searchsorted(mids, x, side="right")
    codes = lo.astype(np.uint8)
    tie = lo != hi  # x sits exactly on a midpoint
    if np.any(tie):
        c = lo[tie]
        codes[tie] = (c + (c & 1)).astype(np.uint8)  # even of {c, c+1}
    return codes


def round_to_fp4(x):
    """Round to the nearest FP4 value, saturating past +-6. Returns 4-bit codes.

    Accepts a scalar or ndarray; non-finite input raises InvalidValue.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("round_to_fp4 requires finite input")
    neg = np.signbit(arr) & (arr != 0)  # -0.0 canonicalizes to +0
    mag = np.minimum(np.abs(arr), FP4_MAX)
    codes = _round_even(mag, _FP4_MIDS).reshape(arr.shape)
    codes = np.where(neg, codes | 0x8, codes).astype(np.uint8)
    return codes if arr.ndim else codes[()]


def decode_fp4(codes):
    """Decode 4-bit codes to their FP4 values (both zeros decode to +0.0)."""
    return FP4_DECODE[np.asarray(codes, dtype=np.uint8)]


def encode_fp4(values):
    """Alias of round_to_fp4; exact values map to their canonical codes."""
    return round_to_fp4(values)


def round_to_e4m3(x):
    """Round a non-negative value to the nearest finite E4M3 code.

    Round-to-nearest-even over the full value set including subnormals;
    x > 448 saturates to the max-finite code 0x7E.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidValue("round_to_e4m3 requires finite non-negative input")
    mag = np.minimum(arr, E4M3_MAX)
    codes = _round_even(mag, _E4M3_MIDS).reshape(arr.shape)
    return codes if arr.ndim else codes[()]


def decode_e4m3(codes):
    """Decode E4M3 codes; NaN codes are rejected (scales must be finite)."""
    codes = np.asarray(codes, dtype=np.uint8)
    if np.any(codes & 0x7F == 0x7F):
        raise InvalidValue("NaN E4M3 code cannot be used as a scale")
    return E4M3_DECODE[codes]


def round_to_e8m0(x):
    """Round a positive value to the nearest power of two, ties up.

    Returns the E8M0 code (decoded value 2**(code-127)), clamped to 0..254.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidValue("round_to_e8m0 requires finite positive input")
    m, e = np.frexp(arr)  # x = m * 2**e, m in [0.5, 1)
    # x = (2m) * 2**(e-1) with 2m in [1, 2); midpoint in value space is 1.5.
    exp = np.where(2.0 * m < 1.5, e - 1, e)
    codes = np.clip(exp + 127, 0, 254).astype(np.uint8)
    return codes if arr.ndim else codes[()]


def decode_e8m0(codes):
    codes = np.asarray(codes, dtype=np.uint8)
    if np.any(codes == E8M0_NAN):
        raise InvalidValue("NaN E8M0 code cannot be used as a scale")
    return E8M0_DECODE[codes]


class ScaleFormat(Enum):
    E4M3 = 0
    E8M0 = 1


@dataclass(frozen=True)
class BlockSpec:
    """Block size and scale format of a microscaling layout."""

    block_size: int
    scale_format: ScaleFormat

    def __post_init__(self):
        allowed = {(16, ScaleFormat.E4M3), (32, ScaleFormat.E8M0)}
        if (self.block_size, self.scale_format) not in allowed:
            raise InvalidValue(
                f"unsupported block spec ({self.block_size}, {self.scale_format})"
            )


NVFP4 = BlockSpec(16, ScaleFormat.E4M3)
MXFP4 = BlockSpec(32, ScaleFormat.E8M0)


def _encode_scales(raw, spec):
    """8-bit scale codes for an array of raw (non-negative) block scales."""
    if spec.scale_format is ScaleFormat.E4M3:
        codes = round_to_e4m3(raw)
        # Tiny but non-zero blocks keep a representable scale instead of
        # collapsing to zero, preserving their sign information.
        bumped = (np.asarray(codes) == 0) & (raw > 0)
        codes = np.where(bumped, np.uint8(1), codes).astype(np.uint8)
        return codes
    codes = np.zeros(raw.shape, dtype=np.uint8)
    pos = raw > 0
    if np.any(pos):
        codes[pos] = round_to_e8m0(raw[pos])
    return codes


def _decode_scales(codes, spec):
    if spec.scale_format is ScaleFormat.E4M3:
        return decode_e4m3(codes)
    return decode_e8m0(codes)


def _quantize_rows(x, spec):
    """Vectorized core: x is (n_blocks, block_size) -> (codes, scale_codes).

    codes come back unpacked, one uint8 per element.
    """
    raw = np.max(np.abs(x), axis=1) / FP4_MAX
    scale_codes = _encode_scales(raw, spec)
    scales = _decode_scales(scale_codes, spec)
    safe = np.where(scales > 0, scales, 1.0)
    scaled = x / safe[:, None]
    scaled[scales == 0] = 0.0  # zero-scale blocks store zero codes
    codes = round_to_fp4(scaled)
    return codes, scale_codes


def pack_nibbles(codes):
    """Pack an even-length trailing axis of 4-bit codes, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.shape[-1] % 2:
        raise ShapeError("nibble packing needs an even number of codes")
    lo = codes[..., 0::2]
    hi = codes[..., 1::2]
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_nibbles(packed, n):
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.shape[:-1] + (n,), dtype=np.uint8)
    out[..., 0::2] = packed & 0xF
    out[..., 1::2] = packed >> 4
    return out


@dataclass(frozen=True)
class Fp4Block:
    """block_size FP4 codes packed two per byte plus one shared scale code."""

    codes: bytes
    scale: int
    spec: BlockSpec

    def __post_init__(self):
        if len(self.codes) != self.spec.block_size // 2:
            raise ShapeError(
                f"packed block must be {self.spec.block_size // 2} bytes"
            )


def quantize_block(x, spec=NVFP4):
    """Quantize one block of block_size finite reals to an Fp4Block."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (spec.block_size,):
        raise ShapeError(f"block must have exactly {spec.block_size} elements")
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("quantize_block requires finite input")
    codes, scale_codes = _quantize_rows(arr[None, :], spec)
    packed = pack_nibbles(codes[0])
    return Fp4Block(codes=packed.tobytes(), scale=int(scale_codes[0]), spec=spec)


def dequantize_block(block):
    """Recover block_size reals from an Fp4Block (scale x code, in float64)."""
    codes = unpack_nibbles(
        np.frombuffer(block.codes, dtype=np.uint8), block.spec.block_size
    )
    scale = _decode_scales(np.uint8(block.scale), block.spec)
    return float(scale) * decode_fp4(codes)


@dataclass
class QuantTensor:
    """A 2-D tensor stored as packed FP4 codes plus a row-major scale grid.

    Each row is tiled along the column axis into blocks of spec.block_size
    elements; within a byte the lower-index element occupies the low nibble.
    """

    rows: int
    cols: int
    spec: BlockSpec
    codes: np.ndarray  # uint8, (rows, cols // 2), packed nibbles
    scales: np.ndarray  # uint8, (rows, cols // block_size)

    @property
    def block_grid(self):
        return (self.rows, self.cols // self.spec.block_size)

    def row_slice(self, start, stop):
        """View of a contiguous row range as another QuantTensor."""
        return QuantTensor(
            rows=stop - start,
            cols=self.cols,
            spec=self.spec,
            codes=self.codes[start:stop],
            scales=self.scales[start:stop],
        )

    def col_slice(self, start, stop):
        """View of a block-aligned column range as another QuantTensor."""
        bs = self.spec.block_size
        if start % bs or stop % bs:
            raise ShapeError("column slices must align to block boundaries")
        return QuantTensor(
            rows=self.rows,
            cols=stop - start,
            spec=self.spec,
            codes=self.codes[:, start // 2 : stop // 2],
            scales=self.scales[:, start // bs : stop // bs],
        )


def quantize(x, spec=NVFP4):
    """Quantize a 2-D tensor block-row-wise into a QuantTensor."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("quantize expects a 2-D tensor")
    rows, cols = arr.shape
    if cols % spec.block_size:
        raise ShapeError(
            f"cols ({cols}) must be a multiple of block_size ({spec.block_size});"
            " padding is the caller's responsibility"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("quantize requires finite input")
    blocks = arr.reshape(-1, spec.block_size)
    codes, scale_codes = _quantize_rows(blocks, spec)
    packed = pack_nibbles(codes.reshape(rows, cols))
    return QuantTensor(
        rows=rows,
        cols=cols,
        spec=spec,
        codes=packed,
        scales=scale_codes.reshape(rows, cols // spec.block_size),
    )


def dequantize(qt, dtype=np.float32):
    """Expand a QuantTensor back to dense values (exact: scale x code)."""
    codes = unpack_nibbles(qt.codes, qt.cols)
    vals = decode_fp4(codes).reshape(-1, qt.spec.block_size)
    scales = _decode_scales(qt.scales, qt.spec).reshape(-1)
    out = vals * scales[:, None]
    return out.reshape(qt.rows, qt.cols).astype(dtype)


def fake_quantize(x, spec=NVFP4):
    """Quantize-then-dequantize, elementwise, preserving shape and dtype."""
    arr = np.asarray(x)
    qt = quantize(arr, spec)
    return dequantize(qt, dtype=arr.dtype)


def pad_cols(x, block_size):
    """Zero-pad the column axis up to the next block multiple.

    Padding zeros never change a block max, so the codes and scale of the
    real elements are identical to quantizing the unpadded row tail as a
    short block.
    """
    cols = x.shape[1]
    rem = cols % block_size
    if rem == 0:
        return np.asarray(x)
    out = np.zeros((x.shape[0], cols + block_size - rem), dtype=np.asarray(x).dtype)
    out[:, :cols] = x
    return out


def quantize_padded(x, spec=NVFP4):
    """quantize() after zero-padding the columns to a block multiple."""
    return quantize(pad_cols(np.asarray(x), spec.block_size), spec)


def fake_quantize_padded(x, spec=NVFP4):
    """fake_quantize() tolerant of a ragged column tail (zero-padded)."""
    arr = np.asarray(x)
    if arr.shape[1] % spec.block_size == 0:
        return fake_quantize(arr, spec)
    out = fake_quantize(pad_cols(arr, spec.block_size), spec)
    return np.ascontiguousarray(out[:, : arr.shape[1]])


def fake_quantize_cols(x, spec=NVFP4):
    """Fake quantization with blocks running down the rows (token axis).

    Used for the V operand of attention, whose matmul contracts over tokens:
    microscaling blocks must lie along the contraction axis. The token axis
    is zero-padded to a block multiple if ragged.
    """
    arr = np.asarray(x)
    return np.ascontiguousarray(fake_quantize_padded(arr.T, spec).T)
