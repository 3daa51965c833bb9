"""OCT lesion classification with leave-one-invasive-lesion-out cross-validation."""

__version__ = "0.1.0"
