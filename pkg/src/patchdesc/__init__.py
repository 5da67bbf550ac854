"""Siamese CNN patch descriptors in numpy: layers, spatial transformer, training and evaluation."""

__version__ = "0.1.0"
