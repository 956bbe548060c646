"""Weak KAM solutions and generalized-characteristic semiflows on flat tori."""

__version__ = "0.1.0"
