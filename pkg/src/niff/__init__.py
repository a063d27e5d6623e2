"""Neural implicit frequency filters: spectral convolutions with MLP-synthesized weights."""

__version__ = "0.1.0"
