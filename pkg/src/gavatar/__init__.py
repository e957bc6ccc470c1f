"""Animatable Gaussian avatars: primitive-rigged splats with implicit fields."""

__version__ = "0.1.0"
