"""NVFP4 quantization-aware attention, CPU reference implementation."""

from .codec import (
    MXFP4,
    NVFP4,
    BlockSpec,
    Fp4Block,
    QuantTensor,
    ScaleFormat,
    dequantize,
    dequantize_block,
    fake_quantize,
    fake_quantize_cols,
    quantize,
    quantize_block,
    round_to_e4m3,
    round_to_e8m0,
    round_to_fp4,
)
from .errors import (
    AttnQatError,
    FormatError,
    InvalidValue,
    MissingOPrime,
    ShapeError,
    StabilityError,
    TileError,
)
from .flash import (
    AttnOutputs,
    BwdVariant,
    TileConfig,
    flash_backward,
    flash_forward_inference,
    flash_forward_training,
)
from .oracle import (
    AttnGrads,
    OracleTrace,
    QuantPoints,
    oracle_backward,
    oracle_forward,
)
from .tensors import (
    Rng,
    fp4mm,
    load_quant_tensor,
    load_tensor,
    matmul,
    randn,
    save_quant_tensor,
    save_tensor,
)

__version__ = "0.1.0"
