"""Left-right flip classification for spatial text-audio coherence.

Half of the training views present the channel difference left-minus-right,
half the exact negation (the channels swapped). A small classifier over the
encoded difference latent, concatenated with the text embedding, predicts
which view it got; its BCE is added to the diffusion objective so gradients
reach the text encoder, forcing lateral words to carry signal-consistent
information. Median-plane scenes, where the two channels coincide and the
label is meaningless, are flagged degenerate and dropped from flip batches.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import nn_core as nn
from .dsp import StftConfig, spec_to_planes, stft
from .latent_ae import SpecAutoencoder, encode
from .nn_core import Conv2d, Linear, Module, silu
from .sim import Binaural, channel_difference

DEGENERATE_RMS = 1e-4
PROB_FLOOR = 1e-7


@dataclass
class FlipSample:
    diff_latent: object  # [C, t, f] array or tensor
    text_e: object       # [D] array or tensor (may carry autograd graph)
    g: int               # 1 = channels were swapped
    degenerate: bool = False


def swapped_difference(b: Binaural):
    """Right-minus-left; the exact negation of channel_difference."""
    d = channel_difference(b)
    return type(d)(-d.samples, d.sample_rate)


def flip_label(rng: np.random.Generator) -> int:
    return int(rng.random() < 0.5)


def make_flip_sample(binaural: Binaural, prompt_embedding, rng,
                     ae: SpecAutoencoder,
                     stft_cfg: StftConfig | None = None) -> FlipSample:
    """Encode the (possibly channel-swapped) difference of a binaural pair.

    The flip decision is a fair coin per call. Near-identical channels make
    the label undefined; those samples come back degenerate=True and must
    not enter flip batches.
    """
    cfg = stft_cfg or StftConfig()
    diff = channel_difference(binaural)
    degenerate = diff.rms() < DEGENERATE_RMS
    g = 0 if degenerate else flip_label(rng)
    if g:
        diff = swapped_difference(binaural)
    planes = spec_to_planes(stft(diff, cfg))
    latent = encode(planes, ae)
    return FlipSample(diff_latent=latent, text_e=prompt_embedding, g=g,
                      degenerate=degenerate)


class FlipClassifier(Module):
    """Strided conv pooling of the difference latent, concatenated with the
    text embedding, then a two-layer head to a flip probability."""

    def __init__(self, latent_channels: int = 8, text_dim: int = 128,
                 width: int = 16, seed: int = 0, dtype=torch.float32):
        super().__init__("flipclf")
        self.c1 = self.add_child(Conv2d("flipclf.c1", latent_channels, width,
                                        3, seed, stride=2, padding=1,
                                        dtype=dtype))
        self.c2 = self.add_child(Conv2d("flipclf.c2", width, 2 * width, 3,
                                        seed, stride=2, padding=1,
                                        dtype=dtype))
        self.fc1 = self.add_child(Linear("flipclf.fc1", 2 * width + text_dim,
                                         64, seed, dtype=dtype))
        self.fc2 = self.add_child(Linear("flipclf.fc2", 64, 1, seed,
                                         dtype=dtype))

    def __call__(self, latents: torch.Tensor, text_e: torch.Tensor):
        """[B, C, t, f] latents + [B, D] text -> probabilities [B]."""
        h = silu(self.c2(silu(self.c1(latents))))
        h = nn.mean_pool(h)
        h = torch.cat([h, text_e], dim=-1)
        return nn.sigmoid(self.fc2(silu(self.fc1(h)))).squeeze(-1)


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype)


def loc_loss(samples, classifier: FlipClassifier) -> torch.Tensor:
    """Binary cross-entropy of the flip classifier over a batch.

    Probabilities saturated at exactly 0 or 1 are clamped to 1e-7 from the
    boundary (with a warning) so the loss stays finite.
    """
    if not samples:
        raise ValueError("empty flip batch")
    if any(s.degenerate for s in samples):
        raise ValueError("degenerate samples must be excluded from flip batches")
    dtype = next(iter(classifier.params().values())).dtype
    latents = torch.stack([_as_tensor(s.diff_latent, dtype) for s in samples])
    texts = torch.stack([_as_tensor(s.text_e, dtype) for s in samples])
    labels = torch.tensor([float(s.g) for s in samples], dtype=dtype)
    probs = classifier(latents, texts)
    if bool((probs.detach() <= 0).any() or (probs.detach() >= 1).any()):
        warnings.warn("flip probability saturated; clamping", RuntimeWarning)
    probs = probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(labels * torch.log(probs)
             + (1.0 - labels) * torch.log(1.0 - probs)).mean()


def total_loss(l_theta, l_loc, lambda_loc: float = 1.0):
    """Joint objective: diffusion term plus weighted coherence term."""
    return l_theta + lambda_loc * l_loc
