import json

import numpy as np
import pytest

from binauraldiff import metrics, prompts, sim, wavio
from binauraldiff.dsp import Binaural, StftConfig, Waveform

FS = 16000


def _stereo(left, right, fs=FS):
    return Binaural(Waveform(left, fs), Waveform(right, fs))


def _noise(n, seed=0, scale=0.3):
    return scale * np.random.default_rng(seed).standard_normal(n)


# ---------------------------------------------------------------- distances

def test_stft_distance_zero_and_symmetry():
    x = _noise(12000, 1)
    a = _stereo(x, 0.5 * x)
    b = _stereo(x + _noise(12000, 2, 0.05), 0.5 * x)
    assert metrics.stft_distance(a, a) == 0.0
    assert metrics.stft_distance(a, b) == pytest.approx(
        metrics.stft_distance(b, a), rel=1e-12)


def test_stft_distance_linearity():
    # STFT is linear, so shrinking the gap shrinks the distance exactly
    x = _noise(12000, 3)
    sil = _stereo(np.zeros(12000), np.zeros(12000))
    full = metrics.stft_distance(_stereo(x, x), sil)
    half = metrics.stft_distance(_stereo(0.5 * x, 0.5 * x), sil)
    assert half == pytest.approx(0.5 * full, rel=1e-12)


def test_stft_distance_energy_scale():
    # window-normalized Frobenius norm of a broadband signal against
    # silence lands at sqrt(2)*||x||_2 per channel: rfft keeps half the
    # spectrum (factor N/2 under Parseval) and the squared periodic Hann
    # tiles at sum(w^2)/hop, so norm^2 = (N/2)*(sum w^2/hop)*||x||^2 and
    # dividing by sum(w^2) leaves (N/2)/hop = 2
    x = _noise(32000, 4)
    got = metrics.stft_distance(_stereo(x, x),
                                _stereo(np.zeros(32000), np.zeros(32000)))
    expect = 2.0 * np.sqrt(2.0) * np.linalg.norm(x)
    assert got == pytest.approx(expect, rel=0.05)


def test_stft_distance_length_mismatch():
    a = _stereo(np.zeros(4000), np.zeros(4000))
    b = _stereo(np.zeros(5000), np.zeros(5000))
    with pytest.raises(ValueError, match="length mismatch"):
        metrics.stft_distance(a, b)


def test_env_distance_doubled_sine():
    # envelopes are a and 2a, so the gap is the constant a in each channel
    t = np.arange(FS) / FS
    a = 0.4
    s = a * np.sin(2 * np.pi * 440 * t)
    gt = _stereo(s, s)
    pred = _stereo(2 * s, 2 * s)
    assert metrics.env_distance(gt, gt) == 0.0
    assert metrics.env_distance(gt, pred) == pytest.approx(a, rel=0.02)


def test_env_distance_length_mismatch():
    a = _stereo(np.zeros(4000), np.zeros(4000))
    b = _stereo(np.zeros(5000), np.zeros(5000))
    with pytest.raises(ValueError, match="length mismatch"):
        metrics.env_distance(a, b)


# ----------------------------------------------------------------- ITD/ILD

def test_itd_sign_and_value_for_pure_delay():
    x = _noise(8000, 5)
    for k in (2, 7, 15):
        right = np.zeros_like(x)
        right[k:] = x[:-k]  # right trails, so the left channel leads
        itd = metrics.estimate_itd(_stereo(x, right))
        assert itd is not None and itd > 0
        assert itd == pytest.approx(k / FS, abs=0.1 / FS)


def test_itd_antisymmetric_under_channel_swap():
    x = _noise(8000, 6)
    right = np.zeros_like(x)
    right[9:] = x[:-9]
    fwd = metrics.estimate_itd(_stereo(x, right))
    rev = metrics.estimate_itd(_stereo(right, x))
    assert fwd == pytest.approx(-rev, abs=1e-15)


def test_itd_none_on_silence():
    x = _noise(4000, 7)
    assert metrics.estimate_itd(_stereo(x, np.zeros(4000))) is None
    assert metrics.estimate_itd(_stereo(np.zeros(4000), x)) is None


def test_itd_matches_render_geometry():
    # ear spacing 0.18 m gives spacing*sin(az)/c of total lag
    cfg = sim.RenderConfig()
    rng = np.random.default_rng(8)
    mono = sim.synth_source_signal(3, 0.5, rng)
    for az in (np.pi / 6, np.pi / 3, np.pi / 2):
        b = sim.render_source(mono, sim.SourceSpec(3, "noise_burst", az, 0.0, 1.0), cfg)
        want = cfg.ear_spacing * np.sin(az) / cfg.speed_of_sound
        got = metrics.estimate_itd(b)
        assert got == pytest.approx(want, abs=1.0 / FS)


def test_ild_halved_right_channel():
    x = _noise(8000, 9)
    ild = metrics.estimate_ild(_stereo(x, 0.5 * x))
    assert ild == pytest.approx(20 * np.log10(2.0), abs=1e-9)
    assert metrics.estimate_ild(_stereo(x, x)) == pytest.approx(0.0, abs=1e-12)


def test_ild_none_on_silence():
    x = _noise(4000, 10)
    assert metrics.estimate_ild(_stereo(x, np.zeros(4000))) is None


# ------------------------------------------------------------- side oracle

def _abs_spec(lr, label="noise burst", fb="front", ab="below", d=1.0):
    return prompts.SpatialSpec(
        kind="absolute",
        sources=(prompts.SourceRef(label=label, lr=lr, fb=fb, ab=ab, distance=d),))


def test_prompted_side_rules():
    assert metrics.prompted_side(_abs_spec("left")) == "left"
    two_right = prompts.SpatialSpec(
        kind="absolute",
        sources=(prompts.SourceRef("tone", "right", "front", "above", 2.0),
                 prompts.SourceRef("speech", "right", "behind", "below", 1.5)))
    assert metrics.prompted_side(two_right) == "right"
    mixed = prompts.SpatialSpec(
        kind="absolute",
        sources=(prompts.SourceRef("tone", "left", "front", "above", 2.0),
                 prompts.SourceRef("speech", "right", "behind", "below", 1.5)))
    assert metrics.prompted_side(mixed) is None
    rel = prompts.SpatialSpec(
        kind="relative", relation="left_right",
        sources=(prompts.SourceRef("tone"), prompts.SourceRef("speech")))
    assert metrics.prompted_side(rel) is None


def test_doa_side_closure_on_renders():
    # every lateralized render must agree with a matching prompt
    rng = np.random.default_rng(11)
    mono = sim.synth_source_signal(3, 0.5, rng)
    hits = 0
    cases = 0
    for az in (-np.pi / 2, -np.pi / 3, -np.pi / 6, np.pi / 6, np.pi / 3, np.pi / 2):
        b = sim.render_source(mono, sim.SourceSpec(3, "noise_burst", az, 0.0, 1.0))
        side = "left" if az > 0 else "right"
        spec = _abs_spec(side)
        got = metrics.doa_side_correct(b, spec, np.random.default_rng(0))
        cases += 1
        hits += int(bool(got))
        # and the opposite prompt must fail
        assert metrics.doa_side_correct(
            b, _abs_spec("left" if side == "right" else "right"),
            np.random.default_rng(0)) is False
    assert hits == cases


def test_doa_side_none_without_side_cue():
    x = _noise(4000, 12)
    b = _stereo(x, x)
    rel = prompts.SpatialSpec(
        kind="relative", relation="nearer_farther",
        sources=(prompts.SourceRef("tone"), prompts.SourceRef("speech")))
    assert metrics.doa_side_correct(b, rel, np.random.default_rng(0)) is None


def test_doa_coin_flip_when_itd_ambiguous():
    # identical channels peak at lag zero, below the ambiguity floor
    x = _noise(2000, 13)
    b = _stereo(x, x)
    spec = _abs_spec("left")
    rng = np.random.default_rng(14)
    outcomes = [metrics.doa_side_correct(b, spec, rng) for _ in range(400)]
    rate = np.mean([bool(o) for o in outcomes])
    assert 0.4 < rate < 0.6
    # deterministic for a fixed generator state
    a1 = [metrics.doa_side_correct(b, spec, np.random.default_rng(15))
          for _ in range(5)]
    a2 = [metrics.doa_side_correct(b, spec, np.random.default_rng(15))
          for _ in range(5)]
    assert a1 == a2


def test_doa_coin_flip_on_silent_prediction():
    b = _stereo(np.zeros(2000), np.zeros(2000))
    spec = _abs_spec("right")
    got = metrics.doa_side_correct(b, spec, np.random.default_rng(16))
    assert got in (True, False)


# --------------------------------------------------------------- distance

def test_distance_oracle_exact_on_attenuation_law():
    x = _noise(8000, 17)
    ref = Waveform(x, FS)
    for d in (1.0, 2.0, 4.0, 8.0):
        b = _stereo(x / d, x / d)
        assert metrics.distance_oracle(b, ref) == pytest.approx(d, rel=1e-9)


def test_distance_oracle_clips_and_degenerates():
    x = _noise(8000, 18)
    ref = Waveform(x, FS)
    assert metrics.distance_oracle(_stereo(x / 40, x / 40), ref) == 10.0
    assert metrics.distance_oracle(_stereo(5 * x, 5 * x), ref) == 0.5
    silent = _stereo(np.zeros(8000), np.zeros(8000))
    assert metrics.distance_oracle(silent, ref) == 10.0


def test_distance_oracle_mix_gain_invariance():
    x = _noise(8000, 19)
    ref = Waveform(x, FS)
    b = _stereo(x / 3, x / 3)
    base = metrics.distance_oracle(b, ref)
    scaled = _stereo(0.25 * x / 3, 0.25 * x / 3)
    assert metrics.distance_oracle(scaled, ref, mix_gain=0.25) == pytest.approx(
        base, rel=1e-12)


def test_distance_oracle_monotone_on_renders():
    rng = np.random.default_rng(20)
    mono = sim.synth_source_signal(3, 0.5, rng)
    spec_at = lambda d: sim.SourceSpec(3, "noise_burst", np.pi / 4, 0.0, d)
    ests = [metrics.distance_oracle(sim.render_source(mono, spec_at(d)), mono)
            for d in (1.0, 2.0, 4.0, 8.0)]
    assert all(a < b for a, b in zip(ests, ests[1:]))


# -------------------------------------------------------------- aggregation

def test_aggregate_rows_double_entry():
    rows = [
        {"stft_distance": 1.0, "env_distance": 0.2, "itd_seconds": 1e-4,
         "ild_db": 3.0, "distance_estimate_m": 2.0, "doa_side_correct": True},
        {"stft_distance": 3.0, "env_distance": 0.4, "itd_seconds": None,
         "ild_db": None, "distance_estimate_m": 4.0, "doa_side_correct": False},
        {"stft_distance": 2.0, "env_distance": 0.6, "itd_seconds": 3e-4,
         "ild_db": 1.0, "distance_estimate_m": 3.0, "doa_side_correct": None},
    ]
    agg = metrics.aggregate_rows(rows)
    assert agg["n"] == 3
    assert agg["mean_stft_distance"] == pytest.approx(2.0)
    assert agg["mean_itd_seconds"] == pytest.approx(2e-4)
    assert agg["mean_ild_db"] == pytest.approx(2.0)
    assert agg["doa_side_correct_count"] == 2
    assert agg["doa_side_correct_rate"] == pytest.approx(0.5)
    assert agg["mean_stft_distance_monomono"] is None
    report = metrics.EvalReport(rows=rows, aggregates=agg)
    assert report.recompute_aggregates() == agg


# ------------------------------------------------------------ evaluate_run

def _write_eval_fixture(tmp_path, n=3):
    """Render n single-source scenes, store gt audio and a manifest, and
    mirror the gt files as predictions so distances must vanish."""
    data = tmp_path / "data"
    pred = tmp_path / "pred"
    data.mkdir()
    pred.mkdir()
    entries = []
    azs = [np.pi / 3, -np.pi / 3, np.pi / 4]
    for i in range(n):
        rng = np.random.default_rng(100 + i)
        mono_src = sim.synth_source_signal(3, 0.5, rng)
        b = sim.render_source(
            mono_src, sim.SourceSpec(3, "noise_burst", azs[i], -0.3, 1.0))
        mix_mono = sim.mono_downmix(b)
        bp = data / f"s{i}_gt.wav"
        mp = data / f"s{i}_mono.wav"
        wavio.write_wav(bp, b)
        wavio.write_wav(mp, mix_mono)
        wavio.write_wav(pred / f"s{i}.wav", b)
        spec = _abs_spec("left" if azs[i] > 0 else "right")
        entries.append({
            "id": f"s{i}", "category": "single_absolute",
            "binaural_path": str(bp), "mono_path": str(mp),
            "prompt_text": prompts.generate_prompt(spec),
            "spec": prompts.spec_to_json(spec), "mix_gain": 1.0,
        })
    manifest = tmp_path / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e) + "\n")
    return manifest, pred, entries


def test_evaluate_run_roundtrip(tmp_path):
    manifest, pred, entries = _write_eval_fixture(tmp_path)
    report_path = tmp_path / "report.json"
    report = metrics.evaluate_run(manifest, pred, report_path, seed=0)
    assert [r["id"] for r in report.rows] == ["s0", "s1", "s2"]
    for row in report.rows:
        # prediction is the ground truth file itself
        assert row["stft_distance"] == 0.0
        assert row["env_distance"] == 0.0
        assert row["doa_side_correct"] is True
        # the duplicated mixture carries no lateral cue, so the baseline
        # must score worse than the faithful prediction on spectra
        assert row["stft_distance_monomono"] > 0.0
    assert report.aggregates["doa_side_correct_rate"] == 1.0
    assert report.aggregates == metrics.aggregate_rows(report.rows)

    saved = json.loads(report_path.read_text())
    assert saved["aggregates"]["n"] == 3
    assert len(saved["rows"]) == 3
    csv_path = report_path.with_suffix(".csv")
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",")[0] == "id"


def test_evaluate_run_accepts_row_list(tmp_path):
    manifest, pred, entries = _write_eval_fixture(tmp_path, n=1)
    report = metrics.evaluate_run(entries, pred, tmp_path / "r.json", seed=0)
    assert len(report.rows) == 1


def test_evaluate_run_missing_prediction(tmp_path):
    manifest, pred, entries = _write_eval_fixture(tmp_path)
    (pred / "s1.wav").unlink()
    with pytest.raises(FileNotFoundError, match="s1"):
        metrics.evaluate_run(manifest, pred, tmp_path / "r.json")


def test_evaluate_run_empty_manifest(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty manifest"):
        metrics.evaluate_run(empty, tmp_path, tmp_path / "r.json")
