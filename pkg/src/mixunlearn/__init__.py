"""Desk-scale machine unlearning lab.

Adversarial mixed-sample generation, contrastive unlearning losses, the
alternating generator/unlearner loop, reference baselines, and a full
evaluation kit (accuracy slices, membership inference, loss-density
curves) on top of a small float64 reverse-mode autodiff core.
"""

__version__ = "0.1.0"
