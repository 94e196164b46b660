"""Simulator for atomic crosschain transactions secured by threshold BLS signatures."""

__version__ = "0.1.0"
