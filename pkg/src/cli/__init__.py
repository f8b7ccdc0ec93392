"""Command-line front end"""

from .main import cli, configure_logging

__all__ = ["cli", "configure_logging"]
