"""Signal-level evaluation: spectral and envelope distances, binaural cue
estimators, side/distance oracles, and the per-run report writer.

The report compares each prediction against the rendered ground truth and
against the Mono-Mono baseline (the mono mixture split equally into both
channels, i.e. reconstruction with a zero difference signal).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import prompts
from .dsp import StftConfig, Waveform, envelope, stft
from .sim import Binaural, reconstruct_binaural
from .wavio import read_binaural, read_mono

SILENCE_RMS = 1e-5
ITD_WINDOW_S = 1e-3
# below half a sample the lag sign is numerically meaningless
ITD_AMBIGUOUS_S = 0.5 / 16000.0


def stft_distance(gt: Binaural, pred: Binaural,
                  cfg: StftConfig | None = None) -> float:
    """Sum over channels of the L2 norm of the complex spectrogram
    difference, divided by sqrt(sum of squared window) so the value sits on
    the raw-audio energy scale."""
    cfg = cfg or StftConfig()
    if gt.left.samples.shape != pred.left.samples.shape:
        raise ValueError("length mismatch between ground truth and prediction")
    norm = math.sqrt(float(np.sum(cfg.window**2)))
    total = 0.0
    for g, p in ((gt.left, pred.left), (gt.right, pred.right)):
        diff = stft(g, cfg) - stft(p, cfg)
        total += float(np.linalg.norm(diff))
    return total / norm


def env_distance(gt: Binaural, pred: Binaural) -> float:
    """Channel-averaged RMS gap between analytic-signal envelopes."""
    total = 0.0
    for g, p in ((gt.left, pred.left), (gt.right, pred.right)):
        if g.samples.shape != p.samples.shape:
            raise ValueError("length mismatch between ground truth and prediction")
        gap = envelope(g) - envelope(p)
        total += float(np.sqrt(np.mean(gap**2)))
    return total / 2.0


def estimate_itd(b: Binaural) -> float | None:
    """Inter-channel lag in seconds via windowed cross-correlation with
    parabolic peak refinement. Positive means the left channel leads.
    Returns None when either channel is near silent."""
    left = b.left.samples
    right = b.right.samples
    fs = b.left.sample_rate
    if b.left.rms() < SILENCE_RMS or b.right.rms() < SILENCE_RMS:
        return None
    max_lag = int(round(ITD_WINDOW_S * fs))
    lags = np.arange(-max_lag, max_lag + 1)
    c = np.empty(len(lags))
    for i, k in enumerate(lags):
        # c[k] = sum_m right[m] * left[m-k]: peaks at the lead of the left
        if k >= 0:
            c[i] = float(np.dot(right[k:], left[: len(left) - k]))
        else:
            c[i] = float(np.dot(right[: len(right) + k], left[-k:]))
    peak = int(np.argmax(c))
    lag = float(lags[peak])
    if 0 < peak < len(lags) - 1:
        denom = c[peak - 1] - 2 * c[peak] + c[peak + 1]
        if denom < 0:
            lag += 0.5 * (c[peak - 1] - c[peak + 1]) / denom
    return lag / fs


def estimate_ild(b: Binaural) -> float | None:
    """Level difference 20*log10(rms_left/rms_right) in dB; None when a
    channel is near silent."""
    rl, rr = b.left.rms(), b.right.rms()
    if rl < SILENCE_RMS or rr < SILENCE_RMS:
        return None
    return 20.0 * math.log10(rl / rr)


def prompted_side(spec: prompts.SpatialSpec) -> str | None:
    """The unambiguous lateral cue a prompt asserts about the mixture, if
    any: all absolute sources on one side. Relative prompts place sound on
    both sides or assert nothing lateral, so they carry no mixture-level
    side."""
    if spec.kind != "absolute":
        return None
    sides = {s.lr for s in spec.sources}
    if len(sides) == 1:
        return next(iter(sides))
    return None


def doa_side_correct(b: Binaural, spec: prompts.SpatialSpec,
                     rng: np.random.Generator | None = None) -> bool | None:
    """True when the ITD sign of the audio matches the prompted side.

    Returns None when the prompt has no single-side cue. An undefined or
    sub-sample ITD carries no evidence either way; it is resolved by a coin
    flip from the supplied rng so baselines land at chance, deterministically
    per seed.
    """
    side = prompted_side(spec)
    if side is None:
        return None
    rng = rng or np.random.default_rng(0)
    itd = estimate_itd(b)
    if itd is None or abs(itd) < ITD_AMBIGUOUS_S:
        return bool(rng.random() < 0.5)
    heard = "left" if itd > 0 else "right"
    return heard == side


def doa_side_oracle(b: Binaural, spec: prompts.SpatialSpec,
                    rng: np.random.Generator | None = None) -> bool | None:
    return doa_side_correct(b, spec, rng)


def distance_oracle(b: Binaural, mono_ref: Waveform, ref_distance: float = 1.0,
                    mix_gain: float = 1.0) -> float:
    """Distance readback from the attenuation law: rms falls as 1/d beyond
    the reference distance. mix_gain undoes any peak-normalization applied
    when the scene was mixed."""
    rendered = np.concatenate([b.left.samples, b.right.samples])
    rms = float(np.sqrt(np.mean(rendered**2))) / mix_gain
    ref = mono_ref.rms()
    if rms <= 0 or ref <= 0:
        return 10.0
    return float(np.clip(ref / rms * ref_distance, 0.5, 10.0))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def recompute_aggregates(self) -> dict:
        return aggregate_rows(self.rows)


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate_rows(rows: list[dict]) -> dict:
    out = {"n": len(rows)}
    for key in ("stft_distance", "env_distance", "itd_seconds", "ild_db",
                "distance_estimate_m", "stft_distance_monomono",
                "env_distance_monomono", "distance_estimate_m_monomono"):
        out[f"mean_{key}"] = _mean([r.get(key) for r in rows])
    for key in ("doa_side_correct", "doa_side_correct_monomono"):
        applicable = [r[key] for r in rows if r.get(key) is not None]
        out[f"{key}_count"] = len(applicable)
        out[f"{key}_rate"] = (float(np.mean(applicable))
                              if applicable else None)
    return out


def _load_manifest(manifest) -> list[dict]:
    if isinstance(manifest, (str, Path)):
        from .dataset import load_manifest

        return load_manifest(manifest)
    return list(manifest)


def _eval_entry(entry: dict, pred_dir: str, cfg: StftConfig, seed: int,
                index: int) -> dict:
    # per-row generator keyed by sort position, so worker scheduling
    # cannot change any coin flip
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    gt = read_binaural(entry["binaural_path"])
    mono = read_mono(entry["mono_path"])
    pred = read_binaural(Path(pred_dir) / f"{entry['id']}.wav")
    spec = prompts.spec_from_json(entry["spec"])
    gain = float(entry.get("mix_gain", 1.0))
    zero = Waveform(np.zeros_like(mono.samples), mono.sample_rate)
    monomono = reconstruct_binaural(mono, zero)
    return {
        "id": entry["id"],
        "category": entry.get("category"),
        "stft_distance": stft_distance(gt, pred, cfg),
        "env_distance": env_distance(gt, pred),
        "itd_seconds": estimate_itd(pred),
        "ild_db": estimate_ild(pred),
        "doa_side_correct": doa_side_correct(pred, spec, rng),
        "distance_estimate_m": distance_oracle(pred, mono, mix_gain=gain),
        "stft_distance_monomono": stft_distance(gt, monomono, cfg),
        "env_distance_monomono": env_distance(gt, monomono),
        "itd_seconds_monomono": estimate_itd(monomono),
        "ild_db_monomono": estimate_ild(monomono),
        "doa_side_correct_monomono": doa_side_correct(monomono, spec, rng),
        "distance_estimate_m_monomono": distance_oracle(
            monomono, mono, mix_gain=gain),
    }


def evaluate_run(manifest, pred_dir, report_path, seed: int = 0,
                 stft_cfg: StftConfig | None = None,
                 workers: int = 1) -> EvalReport:
    """Score every manifest row against predictions named <id>.wav.

    Writes <report_path> (JSON) and the same stem with .csv. Every metric
    gets a Mono-Mono baseline column computed from the duplicated mixture.
    Rows are independent, so workers > 1 fans them out over processes
    without changing the result.
    """
    entries = _load_manifest(manifest)
    if not entries:
        raise ValueError("empty manifest: nothing to evaluate")
    pred_dir = Path(pred_dir)
    missing = [e["id"] for e in entries
               if not (pred_dir / f"{e['id']}.wav").exists()]
    if missing:
        raise FileNotFoundError(
            f"missing predictions for ids: {', '.join(map(str, missing[:10]))}"
            + (" ..." if len(missing) > 10 else ""))
    cfg = stft_cfg or StftConfig()
    ordered = sorted(entries, key=lambda r: str(r["id"]))
    args = [(e, str(pred_dir), cfg, seed, i) for i, e in enumerate(ordered)]
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            rows = pool.starmap(_eval_entry, args, chunksize=8)
    else:
        rows = [_eval_entry(*a) for a in args]
    report = EvalReport(rows=rows, aggregates=aggregate_rows(rows))
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump({"aggregates": report.aggregates, "rows": rows}, f, indent=1)
    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return report
