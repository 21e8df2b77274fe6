"""Reference-guided policy optimization for molecular editing at desk scale."""

__version__ = "0.1.0"
