"""Decentralized congestion control simulator for V2V networks (Adaptive DCC and DPA)."""

__version__ = "0.1.0"
