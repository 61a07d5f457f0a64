"""Verified lifting of tensor kernels to an idealized systolic-accelerator ISA."""

__version__ = "0.1.0"
