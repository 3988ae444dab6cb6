"""
xens - ensemble transfer learning for 3-class chest X-ray screening.

Curates labelled image folders into the four training schemes, fine-tunes binary
sub-models, concatenates their frozen features under a trainable softmax head and
compares the resulting models with cross-validated metrics and pooled t-tests.
"""

__version__ = "1.0.0"

from .errors import ConfigError, DataError, ModelError, TrainingError, XensError

__all__ = [
    "__version__",
    "XensError",
    "DataError",
    "ConfigError",
    "ModelError",
    "TrainingError",
]
