"""Distance queries and reactive planning on neural density fields."""

__version__ = "0.1.0"
