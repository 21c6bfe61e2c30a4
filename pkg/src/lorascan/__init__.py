"""Static spectral screening of LoRA adapters for backdoors."""

__version__ = "0.1.0"
