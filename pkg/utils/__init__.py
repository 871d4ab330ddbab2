"""Utility modules for the wisprkit tools."""

from utils.logger import get_logger, setup_logger, log_timed, format_duration

__version__ = "0.1.0"

__all__ = ["get_logger", "setup_logger", "log_timed", "format_duration", "__version__"]
