"""Desk-scale text-to-code language model stack.

Subword tokenization, corpus curation, a decoder-only transformer with a
query-layer head, composable training objectives, two-stage training,
sampling-based generation, and functional-correctness evaluation.
"""

__version__ = "0.1.0"
