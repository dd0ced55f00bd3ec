"""Cross-modal structure-function fusion of brain connectomes with a bi-attention transformer GAN."""

__version__ = "0.1.0"
