"""bracketlab: synthetic bracket languages, staged transfer fine-tuning, and
embedding analytics for small autoregressive transformers."""

__version__ = "0.1.0"
