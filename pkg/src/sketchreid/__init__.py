"""Sketch-to-photo person re-identification with local sketch augmentation,
a universal adversarial perturbation and episodic meta-learning."""

__version__ = "0.1.0"
