"""MOS-aware speech enhancement: PMOS quality prediction, attention-based
spectral enhancement and quantized spectral-model fusion, in pure numpy."""

__version__ = "0.1.0"
