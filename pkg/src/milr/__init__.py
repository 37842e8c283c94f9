"""Mathematically-induced layer recovery for convolutional networks."""
