"""Style-statistics meta-learning for single-source domain-generalized segmentation."""

__version__ = "0.1.0"
