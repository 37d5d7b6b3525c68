"""Python access to the vimq engines: APoT quantization, the LUT linear engine,
the selective-scan engine and whole-model float / quantized inference."""

from ._vimq import (
    CalibrationStats,
    FloatModel,
    NumericalError,
    QuantModel,
    ValidationError,
    VimConfig,
    build_codebook,
    calibrate,
    codebook_levels,
    cosine_similarity,
    dequantize_weights,
    hash_floats,
    init_model,
    linear_oracle,
    linear_quantized,
    load_model,
    load_quant_model,
    quantize_model,
    quantize_token,
    quantize_weights,
    random_image,
    ssm_forward,
    ssm_scan_oracle,
)

__all__ = [name for name in dir() if not name.startswith("_")]
