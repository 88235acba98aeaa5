"""Mixed-precision (4/8-bit row-wise) quantized ViT search with FPGA DSP packing models."""

__version__ = "0.1.0"
