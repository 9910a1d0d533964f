"""Time-domain speech enhancement trained with phonetic feedback from a frozen acoustic model."""

__version__ = "0.1.0"
