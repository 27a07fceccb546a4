"""CNN-LSTM taillight state classifier with spatial and temporal attention."""

__version__ = "0.1.0"
