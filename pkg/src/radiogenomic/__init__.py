"""Radiogenomic survival pipeline: octave-conv segmentation, cGAN modality synthesis,
radiomic features, fused survival models and Shapley attributions."""

__version__ = "0.1.0"
