"""One-class wafer-map defect detection: Deep SVDD, adversarial autoencoders,
and an adversarial autoencoder whose prior is tied to the SVDD hypersphere."""

__version__ = "0.1.0"
