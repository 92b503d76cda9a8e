"""Post-training quantization pipeline for a toy diffusion transformer."""

__version__ = "0.1.0"
