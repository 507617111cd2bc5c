"""In-context RL with a transformer backbone and a rectified-flow action head."""

__version__ = "0.1.0"
