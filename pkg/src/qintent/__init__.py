"""Query intent classification: char/word encoders, training, evaluation and serving."""

from __future__ import annotations

__version__ = "0.1.0"
