"""Latent-space denoiser.

A four-level U-Net over the latent grid predicting the noise component.
Conditioning enters three ways: the pooled-mixture field is concatenated
channel-wise with the noisy latent, the text vector joins the timestep
embedding in a small MLP whose output drives per-block FiLM scale/shift,
and a frequency coordinate channel is appended at the input. Self-attention
runs on the coarser grids where token counts stay small. All residual
tails, FiLM projections, and the output head start at zero so the model is
the zero map at initialization.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from . import nn_core as nn
from .conditioning import timestep_embedding
from .nn_core import Conv2d, GroupNorm, Linear, Module, SelfAttention2d, silu


@dataclass
class UNetConfig:
    latent_channels: int = 8
    cond_channels: int = 8
    widths: tuple = (32, 64, 96, 128)
    strides: tuple = (4, 2, 2, 2)
    attn_levels: tuple = (1, 2, 3)
    text_dim: int = 128
    time_dim: int = 128
    emb_dim: int = 128

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        self.attn_levels = tuple(self.attn_levels)
        if len(self.widths) != len(self.strides):
            raise ValueError("one stride per level")


class FiLMResBlock(Module):
    """Residual block whose mid activation is modulated by the conditioning
    embedding. Zero-init FiLM and tail keep it an identity at start."""

    def __init__(self, name, channels, emb_dim, seed, dtype=torch.float32):
        super().__init__(name)
        self.n1 = self.add_child(GroupNorm(f"{name}.n1", channels, seed, dtype=dtype))
        self.c1 = self.add_child(Conv2d(f"{name}.c1", channels, channels, 3, seed,
                                        padding=1, dtype=dtype))
        self.film = self.add_child(Linear(f"{name}.film", emb_dim, 2 * channels,
                                          seed, dtype=dtype, init="zeros"))
        self.n2 = self.add_child(GroupNorm(f"{name}.n2", channels, seed, dtype=dtype))
        self.c2 = self.add_child(Conv2d(f"{name}.c2", channels, channels, 3, seed,
                                        padding=1, dtype=dtype, init="zeros"))

    def __call__(self, x, emb):
        h = self.c1(silu(self.n1(x)))
        scale, shift = self.film(emb).chunk(2, dim=-1)
        h = nn.film_modulate(h, scale, shift)
        h = self.c2(silu(self.n2(h)))
        return x + h


def _crop_to(x: torch.Tensor, t: int, f: int) -> torch.Tensor:
    return x[..., :t, :f]


class Denoiser(Module):
    def __init__(self, cfg: UNetConfig | None = None, seed: int = 0,
                 dtype=torch.float32):
        super().__init__("unet")
        self.cfg = cfg or UNetConfig()
        c = self.cfg
        w = c.widths
        self.emb1 = self.add_child(Linear("unet.emb1", c.text_dim + c.time_dim,
                                          c.emb_dim, seed, dtype=dtype))
        self.emb2 = self.add_child(Linear("unet.emb2", c.emb_dim, c.emb_dim,
                                          seed, dtype=dtype))
        in_ch = c.latent_channels + c.cond_channels + 1
        self.conv_in = self.add_child(Conv2d("unet.in", in_ch, w[0], 3, seed,
                                             padding=1, dtype=dtype))
        self.downs, self.enc_res, self.enc_attn = [], [], []
        prev = w[0]
        for i, (width, stride) in enumerate(zip(w, c.strides)):
            self.downs.append(self.add_child(Conv2d(
                f"unet.enc{i}.down", prev, width, 3, seed, stride=stride,
                padding=1, dtype=dtype)))
            self.enc_res.append(self.add_child(FiLMResBlock(
                f"unet.enc{i}.res", width, c.emb_dim, seed, dtype=dtype)))
            self.enc_attn.append(self.add_child(SelfAttention2d(
                f"unet.enc{i}.attn", width, seed, heads=4, dtype=dtype))
                if i in c.attn_levels else None)
            prev = width
        self.mid1 = self.add_child(FiLMResBlock("unet.mid1", w[-1], c.emb_dim,
                                                seed, dtype=dtype))
        self.mid_attn = self.add_child(SelfAttention2d("unet.mid.attn", w[-1],
                                                       seed, heads=4, dtype=dtype))
        self.mid2 = self.add_child(FiLMResBlock("unet.mid2", w[-1], c.emb_dim,
                                                seed, dtype=dtype))
        self.ups, self.fuses, self.dec_res, self.dec_attn = [], [], [], []
        for i in reversed(range(len(w))):
            skip_ch = w[i - 1] if i > 0 else w[0]
            self.ups.append(self.add_child(Conv2d(
                f"unet.dec{i}.up", w[i], skip_ch, 3, seed, padding=1, dtype=dtype)))
            self.fuses.append(self.add_child(Conv2d(
                f"unet.dec{i}.fuse", 2 * skip_ch, skip_ch, 3, seed, padding=1,
                dtype=dtype)))
            self.dec_res.append(self.add_child(FiLMResBlock(
                f"unet.dec{i}.res", skip_ch, c.emb_dim, seed, dtype=dtype)))
            self.dec_attn.append(self.add_child(SelfAttention2d(
                f"unet.dec{i}.attn", skip_ch, seed, heads=4, dtype=dtype))
                if i in c.attn_levels else None)
        self.out_norm = self.add_child(GroupNorm("unet.out.norm", w[0], seed,
                                                 dtype=dtype))
        self.out_conv = self.add_child(Conv2d(
            "unet.out.conv", w[0], c.latent_channels, 3, seed, padding=1,
            dtype=dtype, init="zeros"))

    def __call__(self, z_t, a_e, text_e, t):
        """z_t [B,C,T,F], a_e [B,Cc,T,F], text_e [B,text_dim], t int [B]
        -> predicted noise [B,C,T,F]."""
        c = self.cfg
        t_emb = timestep_embedding(t, c.time_dim).to(z_t.dtype)
        emb = self.emb2(silu(self.emb1(torch.cat([text_e, t_emb], dim=-1))))
        b, _, tt, ff = z_t.shape
        coord = torch.linspace(0.0, 1.0, ff, dtype=z_t.dtype)
        coord = coord.view(1, 1, 1, ff).expand(b, 1, tt, ff)
        h = self.conv_in(torch.cat([z_t, a_e, coord], dim=1))
        skips = [h]
        for i in range(len(c.widths)):
            h = self.downs[i](h)
            h = self.enc_res[i](h, emb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h)
            skips.append(h)
        h = self.mid1(h, emb)
        h = self.mid_attn(h)
        h = self.mid2(h, emb)
        for j, i in enumerate(reversed(range(len(c.widths)))):
            skip = skips[i]
            h = nn.upsample_nearest(h, factor=c.strides[i])
            h = self.ups[j](h)
            h = _crop_to(h, skip.shape[-2], skip.shape[-1])
            h = self.fuses[j](torch.cat([h, skip], dim=1))
            h = self.dec_res[j](h, emb)
            if self.dec_attn[j] is not None:
                h = self.dec_attn[j](h)
        return self.out_conv(silu(self.out_norm(h)))


def save_denoiser(path, model: Denoiser, config_extra: dict | None = None,
                  extras: dict | None = None):
    cfg = asdict(model.cfg)
    for key in ("widths", "strides", "attn_levels"):
        cfg[key] = list(cfg[key])
    config = {"kind": "diffusion", "unet": cfg} | (config_extra or {})
    nn.save_checkpoint(path, model.params(), config, extras)


def load_denoiser(path) -> tuple[Denoiser, dict, dict]:
    """Returns (model, config, extras); config carries schedule and scale
    fields written by the trainer."""
    tensors, config, extras = nn.load_checkpoint(path)
    if config.get("kind") != "diffusion":
        raise ValueError(f"{path}: checkpoint is not a diffusion model")
    cfg = dict(config["unet"])
    for key in ("widths", "strides", "attn_levels"):
        cfg[key] = tuple(cfg[key])
    model = Denoiser(UNetConfig(**cfg))
    model.load_params(tensors)
    return model, config, extras
