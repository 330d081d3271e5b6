"""Python bindings for the cekg C++ core."""

from ._core import *  # noqa: F401,F403
from ._core import CekgError  # noqa: F401

__version__ = "0.1.0"
