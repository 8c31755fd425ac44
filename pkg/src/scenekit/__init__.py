"""Incremental scene modelling toolkit: tracking-image conversion, dense
bundle adjustment, GP depth completion, neural-point surface light fields
and a product-line pipeline assembler."""

__version__ = "0.1.0"
