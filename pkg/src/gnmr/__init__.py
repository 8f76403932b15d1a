"""Multi-behavior graph neural recommendation (GNMR) engine."""
__version__ = "0.1.0"
