"""Frame selection by search, feature mapping, and search again."""

__version__ = "0.1.0"
