"""Sensitivity classifier and sentence embedding service.

Serves the /score, /embed and /healthz contracts, and owns the
fine-tuning CLI that produces the classifier checkpoints it loads.
"""

__version__ = "0.1.0"
