"""Traffic-speed prediction with per-detector LSTM tuning and model sharing."""

__version__ = "0.1.0"
