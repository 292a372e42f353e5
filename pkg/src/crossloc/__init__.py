"""Hybrid cross-device visual localization: retrieval, classical PnP, and a
pluggable neural metric branch, with a synthetic scene simulator and a
recall evaluation harness."""

__version__ = "0.1.0"
