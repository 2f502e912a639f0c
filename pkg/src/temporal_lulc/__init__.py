"""Patch-based multi-label land-use/land-cover classification toolkit.

Provides a mono-temporal pipeline (single-month patch -> CNN -> class
distribution), a multi-temporal pipeline (monthly feature sequence -> LSTM
head -> class distribution), CLC ontology aggregation, distribution-label
losses, micro-F1 evaluation, map assembly and post-classification change
detection, plus a deterministic synthetic seasonal corpus for desk-scale
verification.
"""

__version__ = "0.1.0"
