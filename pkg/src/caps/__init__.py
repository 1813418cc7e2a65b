"""Three-path gated attention forecasting engine."""

__version__ = "0.1.0"
