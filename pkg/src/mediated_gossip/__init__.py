"""Simulator and analysis toolkit for mediated epidemic dissemination games."""

from .core import SimConfig, age, message_bits, seq_of, validate_config

__all__ = ["SimConfig", "age", "message_bits", "seq_of", "validate_config"]
__version__ = "0.1.0"
