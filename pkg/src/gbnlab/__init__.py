"""gbnlab: boundary-conditioned graph message passing and spectral diagnostics."""

__version__ = "0.1.0"
