"""Conditioning paths for the denoiser.

Text: closed-vocabulary token embeddings plus a learned position table
initialized to sinusoid values, mean-pooled and pushed through a two-layer
MLP to a 128-dim vector. Zeroing both embedding tables yields the exact zero
vector because the MLP biases start at zero and SiLU fixes zero.

Mono audio: the mixture spectrogram planes are average-pooled onto the
latent grid and passed through a small conv stack, giving a conditioning
field that concatenates channel-wise with the latent.
"""
from __future__ import annotations

import numpy as np
import torch

from . import nn_core as nn
from . import prompts
from .nn_core import Conv2d, Linear, Module, silu

D_TEXT = 128
MAX_TOKENS = 48


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Transformer-style position encodings: sin on even dims, cos on odd."""
    if dim % 2:
        raise ValueError("dim must be even")
    pos = np.arange(length)[:, None]
    idx = np.arange(dim // 2)[None, :]
    angle = pos / (10000.0 ** (2 * idx / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def timestep_embedding(t, dim: int = 128) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps; accepts scalar or 1-D."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-np.log(10000.0) * torch.arange(half) / half)
    angle = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=1)


class TextEncoder(Module):
    def __init__(self, seed: int = 0, dtype=torch.float32,
                 vocab: tuple = prompts.VOCABULARY):
        super().__init__("text")
        self.vocab = vocab
        self.tok = self.add_param("tok", nn.seeded_init(
            "text.tok", (len(vocab), D_TEXT), "kaiming_uniform", seed, dtype))
        pos0 = sinusoid_table(MAX_TOKENS, D_TEXT)
        self.pos = self.add_param("pos", torch.tensor(pos0, dtype=dtype))
        self.fc1 = self.add_child(Linear("text.fc1", D_TEXT, D_TEXT, seed,
                                         dtype=dtype))
        self.fc2 = self.add_child(Linear("text.fc2", D_TEXT, D_TEXT, seed,
                                         dtype=dtype))

    def __call__(self, ids: torch.Tensor) -> torch.Tensor:
        """Token id batch [B, L] -> embeddings [B, D_TEXT]."""
        if ids.shape[-1] > MAX_TOKENS:
            raise ValueError(f"prompt longer than {MAX_TOKENS} tokens")
        h = self.tok[ids] + self.pos[: ids.shape[-1]][None, :, :]
        h = h.mean(dim=1)
        return self.fc2(silu(self.fc1(h)))


def prompt_ids(text: str) -> list[int]:
    return prompts.tokenize(text)


def encode_prompt(text: str, enc: TextEncoder) -> np.ndarray:
    """Prompt sentence(s) -> conditioning vector [D_TEXT]. Raises
    VocabularyError on any token outside the grammar lexicon."""
    ids = torch.tensor([prompt_ids(text)], dtype=torch.long)
    with torch.no_grad():
        return enc(ids)[0].numpy()


class MonoEncoder(Module):
    """Pooled mixture spectrogram planes [B, 2, T/r, F/r] (already scaled)
    -> conditioning field [B, out_channels, T/r, F/r]."""

    def __init__(self, seed: int = 0, out_channels: int = 8, width: int = 16,
                 dtype=torch.float32):
        super().__init__("monoenc")
        self.out_channels = out_channels
        self.c1 = self.add_child(Conv2d("monoenc.c1", 3, width, 3, seed,
                                        padding=1, dtype=dtype))
        self.c2 = self.add_child(Conv2d("monoenc.c2", width, out_channels, 3,
                                        seed, padding=1, dtype=dtype))

    def __call__(self, pooled: torch.Tensor) -> torch.Tensor:
        b, _, t, f = pooled.shape
        coord = torch.linspace(0.0, 1.0, f, dtype=pooled.dtype)
        coord = coord.view(1, 1, 1, f).expand(b, 1, t, f)
        return self.c2(silu(self.c1(torch.cat([pooled, coord], dim=1))))


def pool_planes(planes: torch.Tensor, ratio: int) -> torch.Tensor:
    """Average-pool [B, C, T, F] down to the latent grid [B, C, T/r, F/r]."""
    return torch.nn.functional.avg_pool2d(planes, ratio)


def condition_dropout_mask(rng: np.random.Generator, n: int,
                           p: float = 0.1) -> np.ndarray:
    """Per-sample Bernoulli(p) drop decisions for classifier-free guidance."""
    return rng.random(n) < p
