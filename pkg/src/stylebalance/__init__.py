"""Class-preserving style-transfer augmentation and attention classification."""

__version__ = "0.1.0"
