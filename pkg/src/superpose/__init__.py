"""Superposing two transformer experts with B-spline blending and layer autoencoders."""
__version__ = "0.1.0"
