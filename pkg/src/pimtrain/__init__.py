"""Simulator and quantization-aware training engine for analog in-memory
MAC hardware: scheme-accurate forward digitization, scaled straight-through
backward, interface non-ideality models, BN calibration, and the study
procedures around them."""

__version__ = "0.1.0"
