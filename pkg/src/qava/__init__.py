"""Query-agnostic visual attacks against a miniature vision-language model."""

__version__ = "0.1.0"
