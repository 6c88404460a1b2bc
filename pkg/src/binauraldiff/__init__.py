"""Text-prompted binaural audio synthesis toolkit.

A self-contained pipeline that (1) synthesizes a simulated binaural dataset
with spatial text prompts, (2) trains a latent diffusion model that generates
the left-minus-right channel difference conditioned on those prompts, and
(3) evaluates generated binaural audio with signal-level spatial metrics.
"""

__version__ = "0.1.0"
