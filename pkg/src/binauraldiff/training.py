"""Two-stage training orchestration over a dataset manifest.

Stage one fits the spectrogram autoencoder on channel-difference planes.
Stage two freezes it, caches every scene's latent (and its mirrored twin),
and jointly trains the denoiser, text encoder, mixture encoder, and flip
classifier. Both stages write a rolling resumable checkpoint and a CSV
loss log with columns (step, l_theta, l_loc, lambda_loc).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import coherence, diffusion, latent_ae
from . import nn_core as nn
from .conditioning import (MonoEncoder, TextEncoder, condition_dropout_mask,
                           pool_planes)
from .config import RunConfig
from .dsp import spec_to_planes, stft
from .latent_ae import pad_to_multiple
from .unet import Denoiser, UNetConfig
from .wavio import read_binaural, read_mono

AE_CKPT = "ae.ckpt"
DIFFUSION_CKPT = "diffusion.ckpt"
AE_LOG = "ae_loss.csv"
DIFFUSION_LOG = "diffusion_loss.csv"
LOG_HEADER = "step,l_theta,l_loc,lambda_loc\n"


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries the last usable checkpoint."""

    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        at = f"; last checkpoint: {checkpoint}" if checkpoint else \
            "; no checkpoint was written yet"
        super().__init__(f"loss became non-finite at step {step}{at}")


def _np_rng_state(rng: np.random.Generator) -> dict:
    import json

    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def diff_planes_for_row(row: dict, stft_cfg) -> np.ndarray:
    """Channel-difference spectrogram planes for one manifest row, from the
    cached difference track when present."""
    if row.get("diff_path"):
        diff = read_mono(row["diff_path"])
    else:
        from .sim import channel_difference

        diff = channel_difference(read_binaural(row["binaural_path"]))
    return spec_to_planes(stft(diff, stft_cfg))


def _append_log(path: Path, step: int, l_theta: float, l_loc: float,
                lambda_loc: float):
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as f:
        if new:
            f.write(LOG_HEADER)
        f.write(f"{step},{l_theta:.8f},{l_loc:.8f},{lambda_loc}\n")


def read_loss_log(path) -> dict[str, np.ndarray]:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    rows = np.atleast_1d(rows)
    return {name: np.asarray(rows[name]) for name in rows.dtype.names}


# ---------------------------------------------------------------------------
# stage one: autoencoder

def train_autoencoder_stage(rows: list[dict], cfg: RunConfig, out_dir,
                            resume: bool = False) -> Path:
    """Fit the difference-plane autoencoder over the manifest rows; writes
    ae.ckpt and ae_loss.csv under out_dir and returns the checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / AE_CKPT
    log_path = out_dir / AE_LOG
    items = [diff_planes_for_row(r, cfg.stft) for r in rows]

    resume_state = None
    if resume and ckpt_path.exists():
        split, header, extras = _split_checkpoint(ckpt_path, "autoencoder")
        if extras.get("step", 0) >= cfg.ae_train.steps:
            return ckpt_path
        resume_state = {"params": split["model"], "opt": split["opt"],
                        "step": extras["step"], "rng": extras["rng"]}
    if resume_state is None:
        log_path.unlink(missing_ok=True)

    def checkpoint(step, model, opt, rng):
        latent_ae.save_autoencoder(
            ckpt_path, model,
            extras={"step": step, "rng": _np_rng_state(rng)}, opt=opt)

    every = max(500, cfg.ae_train.steps // 8)
    try:
        model, _ = latent_ae.train_ae(
            items, cfg.ae, cfg.ae_train,
            log_fn=lambda s, l: _append_log(log_path, s, l, 0.0, 0.0),
            checkpoint_every=every, checkpoint_fn=checkpoint,
            resume_state=resume_state)
    except FloatingPointError as e:
        step = int(str(e).split("step")[-1]) if "step" in str(e) else -1
        raise TrainingDiverged(
            step, ckpt_path if ckpt_path.exists() else None) from e
    return ckpt_path


def _split_checkpoint(path, kind: str):
    """Load a stage checkpoint, splitting model tensors from optimizer
    moments ("opt." prefix)."""
    tensors, header, extras = nn.load_checkpoint(path)
    if header.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint is not a {kind} checkpoint")
    model_t = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt_t = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return {"model": model_t, "opt": opt_t}, header, extras


# ---------------------------------------------------------------------------
# stage two: conditional denoiser

@dataclass
class DiffusionCaches:
    """Frozen-autoencoder byproducts reused every step."""

    z_pos: np.ndarray  # [N, C, T', F'] latents of the difference planes
    z_neg: np.ndarray  # latents of the mirrored (negated) difference
    amix: np.ndarray  # [N, 2, T', F'] pooled scaled mixture planes
    token_ids: list  # per-row prompt token ids
    degenerate: np.ndarray  # [N] bool: difference too quiet to mirror
    latent_scale: float
    mono_scale: float


def build_caches(rows: list[dict], ae, stft_cfg) -> DiffusionCaches:
    from . import prompts

    r = ae.cfg.downsample_ratio
    z_pos, z_neg, amix, token_ids, degenerate = [], [], [], [], []
    mono_planes = []
    for row in rows:
        planes = diff_planes_for_row(row, stft_cfg)
        z_pos.append(latent_ae.encode(planes, ae))
        z_neg.append(latent_ae.encode(-planes, ae))
        mono = read_mono(row["mono_path"])
        mono_planes.append(spec_to_planes(stft(mono, stft_cfg)))
        diff = read_mono(row["diff_path"]) if row.get("diff_path") else None
        if diff is None:
            from .sim import channel_difference

            diff = channel_difference(read_binaural(row["binaural_path"]))
        degenerate.append(diff.rms() < coherence.DEGENERATE_RMS)
        token_ids.append(prompts.tokenize(row["prompt_text"]))
    mono_scale = latent_ae.compute_input_scale(
        mono_planes[: min(len(mono_planes), 64)])
    pooled = []
    for planes in mono_planes:
        padded = pad_to_multiple(planes, r) / mono_scale
        pooled.append(pool_planes(torch.tensor(padded[None]), r)[0].numpy())
    z_pos = np.stack(z_pos)
    latent_scale = float(max(np.std(z_pos), 1e-6))
    return DiffusionCaches(
        z_pos=z_pos, z_neg=np.stack(z_neg), amix=np.stack(pooled),
        token_ids=token_ids, degenerate=np.array(degenerate),
        latent_scale=latent_scale, mono_scale=mono_scale)


def _embed(text_enc: TextEncoder, ids: list) -> torch.Tensor:
    # prompts differ in length, so items embed one at a time
    return text_enc(torch.tensor([ids], dtype=torch.long))[0]


def _stage_models(cfg: RunConfig, seed: int):
    denoiser = Denoiser(cfg.unet, seed=seed)
    text_enc = TextEncoder(seed=seed)
    mono_enc = MonoEncoder(seed=seed, out_channels=cfg.unet.cond_channels)
    flip = coherence.FlipClassifier(
        latent_channels=cfg.unet.latent_channels, seed=seed)
    return denoiser, text_enc, mono_enc, flip


def _stage_params(models) -> dict[str, torch.Tensor]:
    params: dict[str, torch.Tensor] = {}
    for m in models:
        params.update(m.params())
    return params


def save_diffusion_stage(path, models, opt: nn.AdamW, cfg: RunConfig,
                         caches: DiffusionCaches, step: int,
                         rng: np.random.Generator):
    from dataclasses import asdict

    denoiser = models[0]
    tensors = _stage_params(models) | opt.state_tensors()
    header = {
        "kind": "diffusion-stage",
        "unet": asdict(denoiser.cfg) | {
            "widths": list(denoiser.cfg.widths),
            "strides": list(denoiser.cfg.strides),
            "attn_levels": list(denoiser.cfg.attn_levels)},
        "schedule": asdict(cfg.schedule),
        "latent_scale": caches.latent_scale,
        "mono_scale": caches.mono_scale,
    }
    nn.save_checkpoint(path, tensors, header,
                       {"step": step, "rng": _np_rng_state(rng)})


def load_diffusion_stage(path):
    """Returns (models tuple, header, extras, opt tensor dict)."""
    split, header, extras = _split_checkpoint(path, "diffusion-stage")
    ucfg = dict(header["unet"])
    for key in ("widths", "strides", "attn_levels"):
        ucfg[key] = tuple(ucfg[key])
    denoiser = Denoiser(UNetConfig(**ucfg))
    text_enc = TextEncoder()
    mono_enc = MonoEncoder(out_channels=denoiser.cfg.cond_channels)
    flip = coherence.FlipClassifier(
        latent_channels=denoiser.cfg.latent_channels)
    for m in (denoiser, text_enc, mono_enc, flip):
        own = {k: v for k, v in split["model"].items()
               if k.split(".")[0] == m.name}
        m.load_params(own)
    return (denoiser, text_enc, mono_enc, flip), header, extras, split["opt"]


def train_diffusion_stage(rows: list[dict], cfg: RunConfig, out_dir,
                          resume: bool = False) -> Path:
    """Train the conditional denoiser against cached latents. Requires
    ae.ckpt in out_dir (stage one output); writes diffusion.ckpt and
    diffusion_loss.csv there and returns the checkpoint path."""
    out_dir = Path(out_dir)
    ae_path = out_dir / AE_CKPT
    if not ae_path.exists():
        raise FileNotFoundError(
            f"{ae_path} not found: train the autoencoder stage first")
    ae = latent_ae.load_autoencoder(ae_path)
    ckpt_path = out_dir / DIFFUSION_CKPT
    log_path = out_dir / DIFFUSION_LOG
    caches = build_caches(rows, ae, cfg.stft)
    schedule = diffusion.make_schedule(cfg.schedule)
    tcfg = cfg.diffusion_train
    rng = np.random.default_rng(tcfg.seed)
    models = _stage_models(cfg, tcfg.seed)
    denoiser, text_enc, mono_enc, flip = models
    params = _stage_params(models)
    opt = nn.AdamW(params, nn.AdamWConfig(lr=tcfg.lr))
    first_step = 1
    if resume and ckpt_path.exists():
        loaded, header, extras, opt_t = load_diffusion_stage(ckpt_path)
        models = loaded
        denoiser, text_enc, mono_enc, flip = models
        params = _stage_params(models)
        opt = nn.AdamW(params, nn.AdamWConfig(lr=tcfg.lr))
        opt.load_state_tensors(opt_t, extras["step"])
        rng.bit_generator.state = extras["rng"]
        first_step = extras["step"] + 1
        if first_step > tcfg.steps:
            return ckpt_path
    else:
        log_path.unlink(missing_ok=True)

    n = len(caches.z_pos)
    valid = np.flatnonzero(~caches.degenerate)
    z_scale = caches.latent_scale
    for step in range(first_step, tcfg.steps + 1):
        idx = rng.integers(0, n, size=tcfg.batch_size)
        z0 = torch.tensor(caches.z_pos[idx] / z_scale)
        t = rng.integers(1, schedule.n_steps + 1, size=tcfg.batch_size)
        eps = torch.tensor(rng.standard_normal(z0.shape).astype(np.float32))
        text_e = torch.stack(
            [_embed(text_enc, caches.token_ids[int(i)]) for i in idx])
        a_e = mono_enc(torch.tensor(caches.amix[idx]))
        if tcfg.cond_dropout > 0:
            drop = condition_dropout_mask(rng, tcfg.batch_size,
                                          tcfg.cond_dropout)
            keep = torch.tensor((~drop).astype(np.float32))
            text_e = text_e * keep[:, None]
            a_e = a_e * keep[:, None, None, None]
        l_theta = diffusion.training_loss(
            {"z0": z0, "t": t, "eps": eps, "text_e": text_e, "a_e": a_e},
            denoiser, schedule)
        l_loc = torch.tensor(0.0)
        if tcfg.lambda_loc > 0 and tcfg.flip_batch > 0 and len(valid):
            picks = valid[rng.integers(0, len(valid), size=tcfg.flip_batch)]
            samples = []
            for i in picks:
                g = coherence.flip_label(rng)
                z = caches.z_neg[int(i)] if g else caches.z_pos[int(i)]
                samples.append(coherence.FlipSample(
                    torch.tensor(z / z_scale),
                    _embed(text_enc, caches.token_ids[int(i)]), g))
            l_loc = coherence.loc_loss(samples, flip)
        loss = coherence.total_loss(l_theta, l_loc, tcfg.lambda_loc)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                step, ckpt_path if ckpt_path.exists() else None)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            _append_log(log_path, step, float(l_theta.item()),
                        float(l_loc.item()), tcfg.lambda_loc)
        if step % tcfg.checkpoint_every == 0 or step == tcfg.steps:
            save_diffusion_stage(ckpt_path, models, opt, cfg, caches, step,
                                 rng)
    return ckpt_path


def build_bundle(models_dir, cfg: RunConfig | None = None
                 ) -> diffusion.InferenceBundle:
    """Assemble the inference bundle from a models directory holding
    ae.ckpt and diffusion.ckpt."""
    cfg = cfg or RunConfig()
    models_dir = Path(models_dir)
    ae_path = models_dir / AE_CKPT
    dpath = models_dir / DIFFUSION_CKPT
    for p in (ae_path, dpath):
        if not p.exists():
            raise FileNotFoundError(f"missing model checkpoint: {p}")
    ae = latent_ae.load_autoencoder(ae_path)
    (denoiser, text_enc, mono_enc, _), header, _, _ = \
        load_diffusion_stage(dpath)
    schedule = diffusion.make_schedule(
        diffusion.ScheduleConfig(**header["schedule"]))
    return diffusion.InferenceBundle(
        ae=ae, denoiser=denoiser, text_enc=text_enc, mono_enc=mono_enc,
        schedule=schedule, latent_scale=header["latent_scale"],
        mono_scale=header["mono_scale"], stft_cfg=cfg.stft,
        sample_rate=cfg.data.sample_rate, gamma=cfg.sampling.guidance,
        steps=cfg.sampling.steps)
