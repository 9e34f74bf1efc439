"""Numerical laboratory for pointwise regularity of nondivergence elliptic equations."""
from __future__ import annotations

__version__ = "0.1.0"
