"""Attentional neural machine translation in numpy with fixed-norm output
layers and a lexical translation module."""

__version__ = "0.1.0"
