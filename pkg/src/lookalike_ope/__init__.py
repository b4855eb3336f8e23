"""Off-policy conversion-rate evaluation for lookalike ad targeting."""

__version__ = "0.1.0"
