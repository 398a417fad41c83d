"""frnf: online neural-field fusion of depth, features, and click semantics."""

__version__ = "0.1.0"
