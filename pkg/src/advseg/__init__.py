"""Multi-task brain-structure segmentation with FGSM adversarial training on a numpy autodiff engine."""

__version__ = "0.1.0"
