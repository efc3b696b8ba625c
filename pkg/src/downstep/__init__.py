"""Reduced-order downstep walking toolkit: aSLIP dynamics, BBF-QP and H-LIP control."""

__version__ = "0.1.0"
