"""Noise schedule, forward process, guidance, and DDIM sampling.

The forward process follows z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps on a
linear beta schedule. Sampling runs the deterministic DDIM recursion over a
rounded uniform subset of timesteps from t=N down to t=1, then steps to the
clean latent with abar_0 = 1. Guidance blends conditional and unconditional
predictions; gamma=1 short-circuits to the conditional branch so it matches
bit-for-bit (the blend arithmetic can flip signed zeros).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import sim
from .conditioning import MonoEncoder, TextEncoder, encode_prompt, pool_planes
from .dsp import StftConfig, Waveform, istft, planes_to_spec, spec_to_planes, stft
from .latent_ae import SpecAutoencoder, decode, pad_to_multiple
from .unet import Denoiser


@dataclass
class ScheduleConfig:
    n_steps: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195


@dataclass
class NoiseSchedule:
    """Arrays are 1-indexed by timestep; index 0 holds the t=0 convention
    beta=0, alpha=1, abar=1 used by the final DDIM step."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta) - 1


def make_schedule(cfg: ScheduleConfig | None = None) -> NoiseSchedule:
    cfg = cfg or ScheduleConfig()
    if cfg.n_steps < 2 or not 0 < cfg.beta_start < cfg.beta_end < 1:
        raise ValueError("schedule requires 0 < beta_start < beta_end < 1")
    beta = np.zeros(cfg.n_steps + 1)
    beta[1:] = np.linspace(cfg.beta_start, cfg.beta_end, cfg.n_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Diffuse clean latents to timestep t (int or per-sample array)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any((t < 1) | (t > schedule.n_steps)):
        raise ValueError("t out of range 1..N")
    abar = schedule.alpha_bar[t]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    a = torch.tensor(np.sqrt(abar), dtype=z0.dtype).reshape(shape)
    b = torch.tensor(np.sqrt(1.0 - abar), dtype=z0.dtype).reshape(shape)
    return a * z0 + b * eps


def training_loss(batch: dict, model: Denoiser,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between true and predicted noise. Condition
    dropout is the caller's job: zero the text/audio rows before calling."""
    z_t = q_sample(batch["z0"], batch["t"], batch["eps"], schedule)
    t = torch.as_tensor(np.atleast_1d(np.asarray(batch["t"], dtype=np.int64)))
    pred = model(z_t, batch["a_e"], batch["text_e"], t)
    return ((batch["eps"] - pred) ** 2).mean()


def cfg_predict(z_t, t, text_e, a_e, gamma: float, model: Denoiser):
    """Guided noise prediction: gamma*cond + (1-gamma)*uncond, where the
    unconditional branch uses zero tensors for both conditions."""
    t = torch.as_tensor(np.atleast_1d(np.asarray(t, dtype=np.int64)))
    cond = model(z_t, a_e, text_e, t)
    if gamma == 1.0:
        return cond
    uncond = model(z_t, torch.zeros_like(a_e), torch.zeros_like(text_e), t)
    return gamma * cond + (1.0 - gamma) * uncond


def ddim_timesteps(n_steps: int, steps: int) -> np.ndarray:
    """Descending timestep subset: rounded uniform spacing over {1..N} that
    keeps both endpoints, so the walk starts at t=N and ends at t=1."""
    if steps > n_steps:
        raise ValueError(f"steps {steps} exceeds schedule length {n_steps}")
    if steps == 1:
        return np.array([n_steps], dtype=np.int64)
    grid = np.round(np.linspace(1, n_steps, steps)).astype(np.int64)
    return np.unique(grid)[::-1].copy()


def ddim_sample(model: Denoiser, text_e: torch.Tensor, a_e: torch.Tensor,
                schedule: NoiseSchedule, steps: int = 200, gamma: float = 2.5,
                seed: int = 0, z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic (eta=0) sampler; the latent shape follows a_e."""
    with torch.no_grad():
        if z_init is None:
            rng = np.random.default_rng(seed)
            shape = (a_e.shape[0], model.cfg.latent_channels,
                     a_e.shape[2], a_e.shape[3])
            z = torch.tensor(rng.standard_normal(shape), dtype=a_e.dtype)
        else:
            z = z_init.clone()
        ts = ddim_timesteps(schedule.n_steps, steps)
        for i, t in enumerate(ts):
            t_next = int(ts[i + 1]) if i + 1 < len(ts) else 0
            eps_hat = cfg_predict(z, np.full(z.shape[0], t), text_e, a_e,
                                  gamma, model)
            abar_t = float(schedule.alpha_bar[int(t)])
            abar_n = float(schedule.alpha_bar[t_next])  # index 0 -> 1.0
            x0 = (z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
            z = np.sqrt(abar_n) * x0 + np.sqrt(1.0 - abar_n) * eps_hat
        return z


@dataclass
class InferenceBundle:
    """Everything the text-to-binaural path needs, loaded from checkpoints."""

    ae: SpecAutoencoder
    denoiser: Denoiser
    text_enc: TextEncoder
    mono_enc: MonoEncoder
    schedule: NoiseSchedule
    latent_scale: float
    mono_scale: float
    stft_cfg: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000
    gamma: float = 2.5
    steps: int = 200

    def __post_init__(self):
        if self.ae.cfg.latent_channels != self.denoiser.cfg.latent_channels:
            raise ValueError(
                "checkpoint mismatch: autoencoder latent channels "
                f"{self.ae.cfg.latent_channels} != denoiser "
                f"{self.denoiser.cfg.latent_channels}")
        if self.mono_enc.out_channels != self.denoiser.cfg.cond_channels:
            raise ValueError(
                "checkpoint mismatch: mono-encoder channels do not match "
                "denoiser conditioning channels")


def mono_condition_field(mono: Waveform, bundle: InferenceBundle) -> torch.Tensor:
    """Mixture waveform -> pooled conditioning field [1, C, T/r, F/r]."""
    planes = spec_to_planes(stft(mono, bundle.stft_cfg))
    padded = pad_to_multiple(planes, bundle.ae.cfg.downsample_ratio)
    x = torch.tensor(padded[None] / bundle.mono_scale)
    with torch.no_grad():
        return bundle.mono_enc(pool_planes(x, bundle.ae.cfg.downsample_ratio))


def generate_binaural(mono: Waveform, prompt: str, bundle: InferenceBundle,
                      seed: int = 0) -> sim.Binaural:
    """Text + mixture -> binaural, via the latent channel-difference route."""
    if mono.sample_rate != bundle.sample_rate:
        raise ValueError(
            f"sample rate {mono.sample_rate} != model {bundle.sample_rate}")
    planes = spec_to_planes(stft(mono, bundle.stft_cfg))
    n_frames, n_bins = planes.shape[-2:]
    text_e = torch.tensor(encode_prompt(prompt, bundle.text_enc))[None]
    a_e = mono_condition_field(mono, bundle)
    z = ddim_sample(bundle.denoiser, text_e, a_e, bundle.schedule,
                    steps=bundle.steps, gamma=bundle.gamma, seed=seed)
    z = z[0].numpy() * bundle.latent_scale
    diff_planes = decode(z, bundle.ae, t=n_frames, f=n_bins)
    diff_spec = planes_to_spec(diff_planes)
    diff = Waveform(istft(diff_spec, bundle.stft_cfg, length=len(mono.samples)),
                    mono.sample_rate)
    return sim.reconstruct_binaural(mono, diff)
