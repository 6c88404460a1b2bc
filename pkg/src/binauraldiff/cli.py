"""Command-line pipeline around the library.

Five verbs cover the workflow end to end: synth-data, train-ae,
train-diffusion, infer, eval. Every verb is deterministic given its
config and seed. Exit codes: 0 success, 2 validation problem (bad
config, bad paths, unparseable prompt), 3 runtime or numerical failure.
"""
from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click

from . import dataset, diffusion, metrics, prompts, training, wavio
from .config import ConfigError, RunConfig, SamplingConfig, load_config, \
    write_default_config

PROMPT_HINTS = """prompts follow one of these templates:
  - "The <label> is located <left|right>, <front|behind>, <above|below>, <d>m away."
  - two of the above joined by " And "
  - "The sound from the <label> originates on the <left|right>, and the sound from the <label> originates on the <left|right>."
  - "The sound from the <label> on the <front|back> is located further away, while the sound from the <label> is closer to the <front|back>."
labels: tone, chirp, speech, noise burst, click train (and their aliases)"""


def _resolve_seed(flag: int | None, default: int = 0) -> int:
    """--seed wins; TAS_SEED is the fallback; then the default."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("TAS_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"TAS_SEED must be an integer, got {env!r}")


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (RuntimeError, FloatingPointError, ArithmeticError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except (ValueError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
def main():
    """Binaural channel-difference diffusion: data, training, inference,
    evaluation."""


@main.command("init-config")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Where to write the default config (JSON).")
@_guarded
def init_config(out):
    """Write the default config file, full-scale values noted in comments."""
    write_default_config(out)
    click.echo(f"wrote {out}")


@main.command("synth-data")
@click.option("--config", "config_path", type=click.Path(exists=False),
              default=None, help="Run config; defaults apply when omitted.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Dataset directory to create.")
@click.option("--count", type=int, default=None,
              help="Sample count; defaults to data.train_count.")
@click.option("--seed", type=int, default=None,
              help="Dataset seed; TAS_SEED is the fallback.")
@click.option("--duration", "duration_s", type=float, default=None,
              help="Clip length in seconds; defaults to data.duration_s.")
@click.option("--workers", type=int, default=None,
              help="Parallel render processes; defaults to data.workers.")
@click.option("--force", is_flag=True,
              help="Overwrite a non-empty output directory.")
@_guarded
def synth_data(config_path, out, count, seed, duration_s, workers, force):
    """Render a simulated binaural dataset with spatial prompts."""
    rc = _load_run_config(config_path)
    manifest = dataset.synthesize_dataset(
        out,
        count=count if count is not None else rc.data.train_count,
        seed=_resolve_seed(seed),
        duration_s=duration_s if duration_s is not None else
        rc.data.duration_s,
        category_mix=rc.data.category_mix,
        workers=workers if workers is not None else rc.data.workers,
        force=force)
    rows = dataset.load_manifest(manifest)
    click.echo(f"wrote {len(rows)} samples; manifest: {manifest}")


def _train(stage_fn, log_name, fig_name, config_path, data, out, resume,
           label):
    rc = _load_run_config(config_path)
    rows = dataset.load_manifest(data)
    ckpt = stage_fn(rows, rc, out, resume=resume)
    from . import plots

    fig = plots.plot_loss_log(Path(out) / log_name, Path(out) / fig_name,
                              title=label)
    click.echo(f"checkpoint: {ckpt}")
    click.echo(f"loss log:   {Path(out) / log_name}")
    click.echo(f"loss curve: {fig}")


@main.command("train-ae")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", required=True, type=click.Path(),
              help="Dataset directory or manifest path.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Models directory (receives ae.ckpt).")
@click.option("--resume", is_flag=True,
              help="Continue from an existing checkpoint in --out.")
@_guarded
def train_ae(config_path, data, out, resume):
    """Stage one: fit the difference-spectrogram autoencoder."""
    _train(training.train_autoencoder_stage, training.AE_LOG, "ae_loss.png",
           config_path, data, out, resume, "autoencoder")


@main.command("train-diffusion")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", required=True, type=click.Path(),
              help="Dataset directory or manifest path.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Models directory holding ae.ckpt; receives "
                   "diffusion.ckpt.")
@click.option("--resume", is_flag=True,
              help="Continue from an existing checkpoint in --out.")
@_guarded
def train_diffusion(config_path, data, out, resume):
    """Stage two: train the conditional latent denoiser."""
    _train(training.train_diffusion_stage, training.DIFFUSION_LOG,
           "diffusion_loss.png", config_path, data, out, resume,
           "diffusion")


@main.command("infer")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--mono", "mono_path", required=True,
              type=click.Path(exists=False), help="Input mono mixture WAV.")
@click.option("--prompt", required=True, help="Spatial text prompt.")
@click.option("--models", "models_dir", required=True, type=click.Path(),
              help="Directory with ae.ckpt and diffusion.ckpt.")
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False), help="Output stereo WAV.")
@click.option("--guidance", type=float, default=None,
              help="Guidance weight; defaults to sampling.guidance.")
@click.option("--steps", type=int, default=None,
              help="Sampling steps; defaults to sampling.steps.")
@click.option("--seed", type=int, default=None,
              help="Noise seed; TAS_SEED is the fallback.")
@_guarded
def infer(config_path, mono_path, prompt, models_dir, out_path, guidance,
          steps, seed):
    """Spatialize a mono mixture according to a text prompt."""
    rc = _load_run_config(config_path)
    rc.sampling = SamplingConfig(
        steps=steps if steps is not None else rc.sampling.steps,
        guidance=guidance if guidance is not None else rc.sampling.guidance)
    try:
        prompts.parse_prompt(prompt)
    except ValueError as e:
        raise ConfigError(f"cannot parse prompt: {e}\n{PROMPT_HINTS}")
    seed = _resolve_seed(seed)
    mono = wavio.read_mono(mono_path)
    bundle = training.build_bundle(models_dir, rc)
    wav = diffusion.generate_binaural(mono, prompt, bundle, seed=seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    wavio.write_wav(out_path, wav)
    gamma = rc.sampling.guidance
    sidecar = {
        "input_mono": str(mono_path),
        "prompt": prompt,
        "models": str(models_dir),
        "output": str(out_path),
        "guidance": gamma,
        "steps": rc.sampling.steps,
        "seed": seed,
        "sample_rate": wav.left.sample_rate,
        "duration_s": len(wav.left) / wav.left.sample_rate,
        "schedule_steps": bundle.schedule.n_steps,
        "guidance_mode": ("degenerate: guidance 1 collapses to the "
                          "conditional prediction alone" if gamma == 1.0
                          else "classifier-free: conditional and "
                               "unconditional passes blended"),
    }
    sidecar_path = out_path.with_suffix(".json")
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    click.echo(f"wrote {out_path} (+ {sidecar_path.name})")


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(),
              help="Ground-truth dataset directory or manifest path.")
@click.option("--pred-dir", required=True, type=click.Path(),
              help="Directory of predictions named <id>.wav.")
@click.option("--report", "report_path", required=True,
              type=click.Path(dir_okay=False), help="Report JSON path; the "
              "CSV and figures land next to it.")
@click.option("--seed", type=int, default=None,
              help="Seed for tie-break coin flips; TAS_SEED fallback.")
@click.option("--workers", type=int, default=1,
              help="Parallel scoring processes.")
@click.option("--figures/--no-figures", default=True,
              help="Render evaluation figures next to the report.")
@_guarded
def eval_cmd(manifest, pred_dir, report_path, seed, workers, figures):
    """Score predictions against a manifest; write JSON + CSV (+ figures)."""
    rows = dataset.load_manifest(manifest)
    report = metrics.evaluate_run(rows, pred_dir, report_path,
                                  seed=_resolve_seed(seed), workers=workers)
    report_path = Path(report_path)
    click.echo(f"report: {report_path} (+ {report_path.with_suffix('.csv').name})")
    agg = report.aggregates
    rate = agg.get("doa_side_correct_rate")
    base = agg.get("doa_side_correct_monomono_rate")
    click.echo(f"n={agg['n']}  mean stft={agg['mean_stft_distance']:.4g}  "
               f"mean env={agg['mean_env_distance']:.4g}")
    if rate is not None:
        click.echo(f"side accuracy: {rate:.3f} ({base:.3f} mono-mono, "
                   f"n={agg['doa_side_correct_count']})")
    if figures:
        from . import plots

        for p in plots.plot_eval_report(report, report_path.parent,
                                        manifest_rows=rows):
            click.echo(f"figure: {p}")


if __name__ == "__main__":
    main()
