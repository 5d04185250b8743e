"""Locally differentially private SGD and averaged SGD with bounded-gradient losses."""

from __future__ import annotations

__version__ = "0.1.0"
