"""Planning-state feedback for online adaptation of a toy modular driving stack."""

__version__ = "0.1.0"
