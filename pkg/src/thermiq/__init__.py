"""Interval thermal co-simulation of processor-memory systems."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(*parts: str) -> Path:
    """Path of a file shipped in the package ``data`` directory."""
    return Path(str(resources.files(__name__).joinpath("data", *parts)))
