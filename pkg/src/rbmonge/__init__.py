"""Narrow-stencil Monge-Ampere solver with a reduced over-collocation model."""

__version__ = "0.1.0"
