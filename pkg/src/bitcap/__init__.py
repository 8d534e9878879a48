"""Desk-scale continuous bit-diffusion caption generator.

Discrete sentences become analog bit matrices, get corrupted by a
variance-preserving Gaussian schedule, and are denoised by transformer
stages conditioned on object features and a retrieved sentence.  Stages
stack into a cascade, and a reward-guided policy-gradient phase fine-tunes
the sampler against an in-repo CIDEr-D engine.
"""

__version__ = "0.1.0"
