"""Staged multimodal tumor synthesis and segmentation pipeline.

Stages: phantom data generation, inpainting-based tumor removal,
mask-conditioned latent-diffusion tumor synthesis, hybrid segmenter
training, and overlap-metric evaluation.
"""

__version__ = "0.1.0"
