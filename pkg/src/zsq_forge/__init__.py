"""Zero-shot quantization with hard-sample synthesis, difficulty promotion and feature alignment."""

from .quantizer import FakeQuantModel, QuantParams, calibrate, dequantize, fake_quantize, quantize
from .storage import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["FakeQuantModel", "QuantParams", "calibrate", "dequantize", "fake_quantize", "load_checkpoint",
           "quantize", "save_checkpoint", "__version__"]
