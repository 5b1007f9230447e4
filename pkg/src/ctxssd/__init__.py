"""Context- and attention-augmented single-shot detectors on a numpy core."""

__version__ = "0.1.0"
