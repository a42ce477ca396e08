"""Quantization-aware training with trust-masked gradients, desk-scale.

Subpackages cover the full pipeline: dense tensor primitives and a tape
autodiff engine, the orthonormal Walsh-Hadamard transform, MSE-optimal
grid quantization with trust masks, the quantized linear layer and a small
Llama-style model built on it, an AdamW trainer, gradient-alignment and
mask diagnostics, precision-aware scaling-law fitting, and a bit-exact
INT4 pack/GEMM/dequant reference.
"""

__version__ = "0.1.0"
