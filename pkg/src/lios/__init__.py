"""Static analysis for iOS Mach-O binaries.

Lifts a binary (or .ipa) into a labeled property graph covering functions,
basic blocks, instructions, Objective-C classes and methods, then answers
chainable graph-traversal queries over it, including taint-based
vulnerability detectors.
"""

from .errors import LiosError

__version__ = "0.1.0"

__all__ = ["LiosError", "__version__"]
