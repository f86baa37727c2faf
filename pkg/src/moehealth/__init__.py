"""Mixture-of-experts fusion of EHR, clinical-note and image inputs with missing modalities."""

__version__ = "0.1.0"
