"""Open-set adversarial defense: attention-denoised adversarial training with OpenMax inference."""

__version__ = "0.1.0"
