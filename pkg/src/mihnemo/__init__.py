"""Multihomed NEMO handoff driven by adaptive 802.21-style link triggers."""

__version__ = "0.1.0"
