"""Learning augmentation widths from a Laplace estimate of the marginal likelihood."""

__version__ = "0.1.0"
