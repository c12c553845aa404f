"""Desk-scale continuous conditional diffusion models.

Label-dependent forward/reverse diffusion, vicinal denoising losses,
classifier-free guidance with DDIM sampling, one-step distillation, and
the sliding-window evaluation metrics for continuous-label generation.
"""

__version__ = "0.1.0"
