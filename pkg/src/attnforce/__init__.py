"""Attention forcing for sequence-to-sequence models: scheduled (SAF) and parallel (PAF) variants."""

__version__ = "0.1.0"
