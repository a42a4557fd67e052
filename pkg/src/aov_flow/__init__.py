"""Modular multi-agent workflows planned as AOV graphs and refined while they run."""

from importlib.metadata import PackageNotFoundError, version

from .cli import main

try:
    __version__ = version("aov-flow")
except PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = ["__version__", "main"]
