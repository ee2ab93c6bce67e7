"""Unsupervised domain adaptation toolkit for binary phenotype
classification on 3D knee volumes.

Pipeline stages: synthetic data generation, preprocessing (resize / ROI
crop / augmentation), source classifier training, adversarial target
encoder adaptation, and statistical evaluation.
"""

__version__ = "0.1.0"
