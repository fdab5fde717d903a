"""Graph continual learning with condensed memories and frequency-calibrated replay."""

__version__ = "0.1.0"
