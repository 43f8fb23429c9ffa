"""Desk-scale diffusion text generation with token timestep allocation."""

__version__ = "0.1.0"
