"""Solver for McKean-Vlasov FBSDEs with jumps and their decoupling field."""

__version__ = "0.1.0"
