"""Loop-compatibility toolkit: extraction, models, baseline, evaluation."""

__version__ = "0.1.0"

from . import audio, dedup, evaluate, extract, mashability, negatives, nn
from .errors import LoopkitError
