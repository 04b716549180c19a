"""Desk-scale lab for input-gradient-aligned adversarial training.

Subpackages and modules:

- autodiff: tape-based reverse-mode differentiation with double backward
- models: small dense and convolutional classifiers on that tape
- data: synthetic blob images, CIFAR-style binary loading, cutout
- attribution: saliency, input-times-gradient, integrated gradients
- inequality: Gini coefficients, regional variants, monotone reductions
- attacks: PGD, saliency-guided noise and occlusion, random baselines
- theory: closed-form deviation predictions and concentration bounds
- training: standard, adversarial, and gradient-aligned loops
- harness: experiment orchestration, caching, CSV and SVG reports
"""

__version__ = "0.1.0"
