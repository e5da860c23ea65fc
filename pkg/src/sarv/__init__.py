"""Sentiment classification toolkit for Persian product reviews.

The pipeline runs from raw review text to trained classifiers:
normalization and tokenization (:mod:`sarv.textproc`), word and character
encoding (:mod:`sarv.embed`), a small numpy backprop core (:mod:`sarv.nn`),
seven model presets (:mod:`sarv.models`), training with on-disk shards
(:mod:`sarv.train`), and confusion-matrix metrics (:mod:`sarv.metrics`).
The ``sarv`` command line wires the stages together.
"""

from sarv.textproc import PAD, NormConfig, normalize, tokenize, unify_length

__version__ = "0.1.0"

__all__ = [
    "PAD",
    "NormConfig",
    "normalize",
    "tokenize",
    "unify_length",
    "__version__",
]
