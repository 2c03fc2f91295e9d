"""Segmentation toolkit for small, ambiguous bright lesions on brain MRI slices.

Four architectures (UNet, Probabilistic UNet, TransUNet, Probabilistic
TransUNet), two latent-injection combiners (tile-broadcast and stride-2
deconvolution), a preprocessing/augmentation pipeline, a synthetic lesion
generator for desk-scale verification, and two evaluation protocols
(k-fold cross-validation, cross-dataset robustness).
"""

__version__ = "0.1.0"
