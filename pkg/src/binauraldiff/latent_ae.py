"""Convolutional autoencoder compressing 2-plane complex spectrograms.

The channel-difference spectrogram [2, T, F] is reflect-padded so both axes
divide the downsample ratio, scaled by a global constant recorded in the
checkpoint, and mapped to a latent [C, T/r, F/r]. The decoder mirrors the
encoder. A frequency-coordinate channel is appended at both ends so the
convolutions can specialize per band without giving up weight sharing.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import nn_core as nn
from .dsp import hann_window
from .nn_core import Conv2d, GroupNorm, Module, silu


@dataclass
class AEConfig:
    downsample_ratio: int = 4
    latent_channels: int = 8
    in_planes: int = 2
    widths: tuple = (24, 48)
    kl_weight: float = 0.0  # >0 samples the latent and adds a unit-prior penalty
    res_blocks: int = 2  # residual blocks astride each bottleneck mixer
    # frequency-global mixing at the bottleneck grid; None disables, the
    # default matches 257 bins reflect-padded to 260 then pooled by 4
    mix_f_bins: int | None = 65
    # same idea at the unpooled grid (padded bin count, 260 for the default
    # transform). The analysis window ties every bin to every sample, so a
    # local-conv stack alone converges slowly; None disables
    mix_in_bins: int | None = None
    # bottleneck mixers learn one matrix per channel when True; a single
    # shared matrix can only express one frequency map times a channel map
    mix_per_channel: bool = True
    # resynthesize-and-reanalyze the decoder output with this window/hop so
    # it can only emit spectrograms some signal actually produces; the
    # values must match the analysis transform. None disables
    cons_window: int | None = None
    cons_hop: int | None = None

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.downsample_ratio != 2 ** (len(self.widths)):
            raise ValueError("one stride-2 stage per width entry")


@dataclass
class AETrainConfig:
    steps: int = 4000
    batch_size: int = 8
    crop_frames: int = 128
    lr: float = 1e-3
    # linear warmup then cosine decay to lr * lr_min_frac; "constant" skips both
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    lr_min_frac: float = 0.05
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if not 0 < self.lr_min_frac <= 1:
            raise ValueError("lr_min_frac must lie in (0, 1]")


def lr_at(step: int, cfg: AETrainConfig) -> float:
    """Learning rate for 1-indexed step under the configured schedule."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    warm = min(cfg.warmup_steps, max(cfg.steps // 10, 1))
    if step <= warm:
        return cfg.lr * step / warm
    span = max(cfg.steps - warm, 1)
    frac = (step - warm) / span
    floor = cfg.lr * cfg.lr_min_frac
    return floor + (cfg.lr - floor) * 0.5 * (1 + math.cos(math.pi * frac))


def pad_to_multiple(planes: np.ndarray, r: int) -> np.ndarray:
    """Reflect-pad the trailing two axes up to multiples of r."""
    t, f = planes.shape[-2:]
    pt = (-t) % r
    pf = (-f) % r
    if max(t, f) < 2 and (pt or pf):
        raise ValueError("input too small to reflect-pad")
    width = [(0, 0)] * (planes.ndim - 2) + [(0, pt), (0, pf)]
    return np.pad(planes, width, mode="reflect")


def unpad(planes: np.ndarray, t: int, f: int) -> np.ndarray:
    return planes[..., :t, :f]


def _freq_coord(x: torch.Tensor) -> torch.Tensor:
    b, _, t, f = x.shape
    coord = torch.linspace(0.0, 1.0, f, dtype=x.dtype)
    return coord.view(1, 1, 1, f).expand(b, 1, t, f)


class ResBlock(Module):
    def __init__(self, name, channels, seed, dtype=torch.float32):
        super().__init__(name)
        self.n1 = self.add_child(GroupNorm(f"{name}.n1", channels, seed, dtype=dtype))
        self.c1 = self.add_child(Conv2d(f"{name}.c1", channels, channels, 3, seed,
                                        padding=1, dtype=dtype))
        self.n2 = self.add_child(GroupNorm(f"{name}.n2", channels, seed, dtype=dtype))
        self.c2 = self.add_child(Conv2d(f"{name}.c2", channels, channels, 3, seed,
                                        padding=1, dtype=dtype, init="zeros"))

    def __call__(self, x):
        h = self.c1(silu(self.n1(x)))
        h = self.c2(silu(self.n2(h)))
        return x + h


class FreqMix(Module):
    """Dense mixing along the frequency axis, shared over batch and time.
    Small conv kernels only couple neighboring bins; spectrogram synthesis
    and analysis need every output to see every bin, and this layer
    supplies that global path. Initialized near the identity.

    With channels=None one matrix serves every channel, which limits the
    layer to (channel map) x (one frequency map); passing the channel
    count gives each channel its own matrix at the same compute cost."""

    def __init__(self, name, f_dim, seed, channels: int | None = None,
                 dtype=torch.float32):
        super().__init__(name)
        shape = (f_dim, f_dim) if channels is None else \
            (channels, f_dim, f_dim)
        w0 = torch.eye(f_dim, dtype=dtype).expand(shape).contiguous()
        w0 = w0 + 0.05 * nn.seeded_init(f"{name}.W", shape,
                                        "kaiming_uniform", seed, dtype)
        self.W = self.add_param("W", w0)
        bshape = (f_dim,) if channels is None else (channels, 1, f_dim)
        self.b = self.add_param("b", torch.zeros(bshape, dtype=dtype))
        self.f_dim = f_dim
        self.channels = channels

    def __call__(self, x):
        if x.shape[-1] != self.f_dim:
            raise ValueError(
                f"frequency axis {x.shape[-1]} != configured {self.f_dim}")
        if self.channels is None:
            return x @ self.W.T + self.b
        if x.shape[1] != self.channels:
            raise ValueError(
                f"channel axis {x.shape[1]} != configured {self.channels}")
        return torch.einsum("bctf,cgf->bctg", x, self.W) + self.b


class SpectroProjector:
    """Resynthesize-and-reanalyze: raw planes -> weighted-overlap-add
    signal -> analysis planes, all as fixed differentiable ops.

    Any true spectrogram crop passes through unchanged (the normalized
    overlap-add recovers every sample the window weights can see), while
    components no signal could produce are stripped. Appended to the
    decoder, it spends the model's capacity entirely on which signal to
    emit rather than on keeping overlapping frames mutually consistent."""

    def __init__(self, window_size: int, hop: int, dtype=torch.float32):
        self.n = window_size
        self.hop = hop
        self.bins = window_size // 2 + 1
        self.w = torch.tensor(hann_window(window_size), dtype=dtype)
        self.w2 = self.w * self.w

    def __call__(self, planes: torch.Tensor) -> torch.Tensor:
        b, _, t, fp = planes.shape
        pad = fp - self.bins
        if pad < 0:
            raise ValueError(
                f"{fp} frequency bins < {self.bins} analysis bins")
        core = planes[..., : self.bins]
        spec = torch.complex(core[:, 0], core[:, 1])
        frames = torch.fft.irfft(spec, n=self.n, dim=-1) * self.w
        length = self.n + (t - 1) * self.hop
        y = torch.nn.functional.fold(
            frames.transpose(1, 2), output_size=(1, length),
            kernel_size=(1, self.n), stride=(1, self.hop))[:, 0, 0]
        prof = torch.nn.functional.fold(
            self.w2[None, :, None].expand(1, self.n, t),
            output_size=(1, length), kernel_size=(1, self.n),
            stride=(1, self.hop))[0, 0, 0]
        y = y / torch.clamp(prof, min=1e-12)
        fr = y.unfold(1, self.n, self.hop) * self.w
        sp = torch.fft.rfft(fr, dim=-1)
        out = torch.stack([sp.real, sp.imag], dim=1)
        if pad:
            # regenerate the reflect padding the analysis path applies
            out = torch.cat(
                [out, out[..., self.bins - 1 - pad : self.bins - 1].flip(-1)],
                dim=-1)
        return out


class SpecAutoencoder(Module):
    """Encoder: strided conv stack to [2C] (mean and log-variance heads);
    decoder: mirror with nearest-neighbor upsampling. Deterministic unless
    kl_weight > 0, in which case training samples z from the posterior."""

    def __init__(self, cfg: AEConfig | None = None, seed: int = 0,
                 dtype=torch.float32, input_scale: float = 1.0):
        super().__init__("ae")
        self.cfg = cfg or AEConfig()
        self.input_scale = float(input_scale)
        w = self.cfg.widths
        c_in = self.cfg.in_planes + 1
        self.enc_lift = None
        self.enc_mix_in = None
        if self.cfg.mix_in_bins:
            self.enc_lift = self.add_child(Conv2d(
                "ae.enc.lift", c_in, w[0], 3, seed, padding=1, dtype=dtype))
            self.enc_mix_in = self.add_child(FreqMix(
                "ae.enc.mixin", self.cfg.mix_in_bins, seed, dtype=dtype))
            c_in = w[0]
        self.enc_convs = []
        for i, width in enumerate(w):
            conv = Conv2d(f"ae.enc.down{i}", c_in, width, 3, seed, stride=2,
                          padding=1, dtype=dtype)
            self.enc_convs.append(self.add_child(conv))
            c_in = width
        mix_ch = w[-1] if self.cfg.mix_per_channel else None
        self.enc_res = [self.add_child(ResBlock(f"ae.enc.res{i}", w[-1], seed,
                                                dtype=dtype))
                        for i in range(self.cfg.res_blocks)]
        self.enc_mix = (self.add_child(FreqMix("ae.enc.mix", self.cfg.mix_f_bins,
                                               seed, channels=mix_ch,
                                               dtype=dtype))
                        if self.cfg.mix_f_bins else None)
        self.enc_out = self.add_child(Conv2d(
            "ae.enc.out", w[-1], 2 * self.cfg.latent_channels, 1, seed, dtype=dtype))
        self.dec_in = self.add_child(Conv2d(
            "ae.dec.in", self.cfg.latent_channels + 1, w[-1], 3, seed, padding=1,
            dtype=dtype))
        self.dec_res = [self.add_child(ResBlock(f"ae.dec.res{i}", w[-1], seed,
                                                dtype=dtype))
                        for i in range(self.cfg.res_blocks)]
        self.dec_mix = (self.add_child(FreqMix("ae.dec.mix", self.cfg.mix_f_bins,
                                               seed, channels=mix_ch,
                                               dtype=dtype))
                        if self.cfg.mix_f_bins else None)
        self.dec_convs = []
        widths_up = list(w[::-1][1:]) + [w[0]]
        c_in = w[-1]
        for i, width in enumerate(widths_up):
            conv = Conv2d(f"ae.dec.up{i}", c_in, width, 3, seed, padding=1,
                          dtype=dtype)
            self.dec_convs.append(self.add_child(conv))
            c_in = width
        self.dec_mix_out = (self.add_child(FreqMix(
            "ae.dec.mixout", self.cfg.mix_in_bins, seed, dtype=dtype))
            if self.cfg.mix_in_bins else None)
        self.dec_out = self.add_child(Conv2d(
            "ae.dec.out", c_in, self.cfg.in_planes, 3, seed, padding=1,
            dtype=dtype, init="zeros"))

    def encode_t(self, x: torch.Tensor, sample: bool = False, rng=None):
        """[B, 2, T, F] (already scaled) -> latent [B, C, T/r, F/r]."""
        h = torch.cat([x, _freq_coord(x)], dim=1)
        if self.enc_lift is not None:
            h = self.enc_mix_in(silu(self.enc_lift(h)))
        for conv in self.enc_convs:
            h = silu(conv(h))
        h = self.enc_res[0](h)
        if self.enc_mix is not None:
            h = self.enc_mix(h)
        for res in self.enc_res[1:]:
            h = res(h)
        stats = self.enc_out(h)
        mu, logvar = stats.chunk(2, dim=1)
        if sample and self.cfg.kl_weight > 0:
            eps = torch.tensor(
                rng.standard_normal(tuple(mu.shape)), dtype=mu.dtype)
            return mu + torch.exp(0.5 * logvar) * eps, (mu, logvar)
        return mu, (mu, logvar)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        h = self.dec_in(torch.cat([z, _freq_coord(z)], dim=1))
        h = self.dec_res[0](h)
        if self.dec_mix is not None:
            h = self.dec_mix(h)
        for res in self.dec_res[1:]:
            h = res(h)
        for conv in self.dec_convs:
            h = silu(conv(nn.upsample_nearest(h)))
        if self.dec_mix_out is not None:
            h = self.dec_mix_out(h)
        return self.dec_out(h)


def encode(planes: np.ndarray, model: SpecAutoencoder) -> np.ndarray:
    """Spectrogram planes [2, T, F] -> latent [C, ceil(T/r)*?, ...]; pads,
    scales, and runs the encoder without gradients."""
    r = model.cfg.downsample_ratio
    padded = pad_to_multiple(np.asarray(planes, dtype=np.float32), r)
    x = torch.tensor(padded[None] / model.input_scale)
    with torch.no_grad():
        z, _ = model.encode_t(x)
    return z[0].numpy()


def decode(z: np.ndarray, model: SpecAutoencoder, t: int | None = None,
           f: int | None = None) -> np.ndarray:
    """Latent [C, t', f'] -> spectrogram planes [2, t'*r, f'*r], cropped to
    (t, f) when given and rescaled to input units."""
    with torch.no_grad():
        planes = model.decode_t(torch.tensor(np.asarray(z, dtype=np.float32))[None])
    out = planes[0].numpy() * model.input_scale
    if t is not None and f is not None:
        out = unpad(out, t, f)
    return out


def compute_input_scale(items: list[np.ndarray], quantile: float = 0.99) -> float:
    """Global magnitude scale: the chosen quantile of |plane values| over the
    (sub)set, floored away from zero."""
    vals = np.concatenate([np.abs(np.asarray(p, dtype=np.float32)).ravel()
                           for p in items])
    return float(max(np.quantile(vals, quantile), 1e-6))


def reconstruction_error(planes: np.ndarray, model: SpecAutoencoder) -> float:
    """Relative L2 over the padded planes."""
    r = model.cfg.downsample_ratio
    padded = pad_to_multiple(np.asarray(planes, dtype=np.float32), r)
    z = encode(planes, model)
    rec = decode(z, model)
    return float(np.linalg.norm(rec - padded) / max(np.linalg.norm(padded), 1e-12))


def train_ae(items: list[np.ndarray], cfg: AEConfig | None = None,
             train_cfg: AETrainConfig | None = None,
             log_fn=None, checkpoint_every: int = 0, checkpoint_fn=None,
             resume_state: dict | None = None
             ) -> tuple[SpecAutoencoder, list[float]]:
    """Fit the autoencoder on spectrogram planes by per-item relative MSE
    on random time crops: each item's squared error is divided by that
    item's mean power, so quiet scenes count as much as loud ones and the
    loss tracks the relative reconstruction error actually reported.

    checkpoint_fn(step, model, opt, rng) fires every checkpoint_every steps;
    resume_state is the dict a checkpoint captured: {params, opt, step, rng}.

    Returns (model, per-step losses). The step-0 value sits near 1.
    """
    cfg = cfg or AEConfig()
    tcfg = train_cfg or AETrainConfig()
    rng = np.random.default_rng(tcfg.seed)
    scale = compute_input_scale(items[: min(len(items), 64)])
    model = SpecAutoencoder(cfg, seed=tcfg.seed, input_scale=scale)
    opt = nn.AdamW(model.params(), nn.AdamWConfig(lr=tcfg.lr))
    first_step = 1
    if resume_state is not None:
        model.load_params(resume_state["params"])
        opt.load_state_tensors(resume_state["opt"], resume_state["step"])
        rng.bit_generator.state = resume_state["rng"]
        first_step = resume_state["step"] + 1
    r = cfg.downsample_ratio
    padded = [pad_to_multiple(np.asarray(p, dtype=np.float32), r) / scale
              for p in items]
    # common crop so every batch stacks, whatever the item lengths
    crop = min([tcfg.crop_frames] + [p.shape[-2] for p in padded])
    crop -= crop % r
    # whole-item power, not crop power: quiet crops of sparse sounds would
    # otherwise blow the weight up
    powers = np.array([max(float(np.mean(p**2)), 1e-8) for p in padded],
                      dtype=np.float32)
    losses = []
    for step in range(first_step, tcfg.steps + 1):
        batch = []
        batch_pow = []
        for idx in rng.integers(0, len(padded), size=tcfg.batch_size):
            p = padded[int(idx)]
            t0 = int(rng.integers(0, (p.shape[-2] - crop) // r + 1)) * r
            batch.append(p[..., t0 : t0 + crop, :])
            batch_pow.append(powers[int(idx)])
        x = torch.tensor(np.stack(batch))
        w = torch.tensor(np.array(batch_pow)).reshape(-1, 1, 1, 1)
        opt.cfg.lr = lr_at(step, tcfg)
        opt.zero_grad()
        z, (mu, logvar) = model.encode_t(x, sample=True, rng=rng)
        rec = model.decode_t(z)
        loss = (((rec - x) ** 2) / w).mean()
        if cfg.kl_weight > 0:
            kl = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).mean()
            loss = loss + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"autoencoder loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if log_fn is not None and step % tcfg.log_every == 0:
            log_fn(step, losses[-1])
        if checkpoint_fn is not None and checkpoint_every > 0 \
                and (step % checkpoint_every == 0 or step == tcfg.steps):
            checkpoint_fn(step, model, opt, rng)
    return model, losses


def save_autoencoder(path, model: SpecAutoencoder, extras: dict | None = None,
                     opt: "nn.AdamW | None" = None):
    """Checkpoint the model; passing the optimizer makes it resumable (its
    moments ride along under "opt." names and loaders ignore them)."""
    config = {"kind": "autoencoder", "ae": asdict(model.cfg) | {
        "widths": list(model.cfg.widths)}, "input_scale": model.input_scale}
    tensors = dict(model.params())
    if opt is not None:
        tensors |= opt.state_tensors()
    nn.save_checkpoint(path, tensors, config, extras)


def load_autoencoder(path) -> SpecAutoencoder:
    tensors, config, _ = nn.load_checkpoint(path)
    if config.get("kind") != "autoencoder":
        raise ValueError(f"{path}: checkpoint is not an autoencoder")
    ae_cfg = dict(config["ae"])
    ae_cfg["widths"] = tuple(ae_cfg["widths"])
    model = SpecAutoencoder(AEConfig(**ae_cfg), input_scale=config["input_scale"])
    model.load_params(tensors)
    return model
