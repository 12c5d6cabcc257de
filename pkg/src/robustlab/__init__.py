"""Desk-scale adversarial robustness laboratory.

Reverse-mode autodiff engine, small CNN classifier with a drop-max pooling
variant, L-infinity attacks (FGSM/PGD/CW), self-training defenses including
the multi-instance variant, contrastive pretraining, and an evaluation
harness with a YAML-driven CLI.
"""

__version__ = "0.1.0"
