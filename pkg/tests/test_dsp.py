"""Transform-level contracts: frame counts, invertibility, energy bookkeeping."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binauraldiff.dsp import (
    Binaural,
    StftConfig,
    Waveform,
    envelope,
    hann_window,
    istft,
    planes_to_spec,
    spec_to_planes,
    stft,
)

FS = 16000


def white(n, seed=0, scale=0.3):
    return np.random.default_rng(seed).uniform(-scale, scale, size=n)


def interior_snr_db(x, y, margin):
    err = x[margin:-margin] - y[margin:-margin]
    ref = x[margin:-margin]
    return 10 * np.log10(np.sum(ref**2) / max(np.sum(err**2), 1e-300))


def test_hann_window_energy_exact():
    w = hann_window(512)
    # periodic Hann has sum of squares exactly 3n/8
    assert np.sum(w**2) == pytest.approx(192.0, abs=1e-9)


def test_frame_count_contract():
    cfg = StftConfig()
    for n in [512, 513, 640, 64000, 12345]:
        got = stft(white(n), cfg).shape[0]
        assert got == 1 + (n - 512) // 128


def test_too_short_input_raises():
    with pytest.raises(ValueError, match="too short"):
        stft(white(511), StftConfig())


def test_non_flat_overlap_rejected():
    # hop of a full half-window breaks the squared-Hann overlap constancy
    with pytest.raises(ValueError, match="overlap"):
        StftConfig(window_size=512, hop=256)


def test_bin_center_sine_concentrates():
    cfg = StftConfig()
    k = 40
    f = k * FS / 512
    t = np.arange(4 * 512) / FS
    s = stft(np.sin(2 * np.pi * f * t), cfg)
    mags = np.abs(s[2]) ** 2
    # the Hann main lobe spans bins k-1..k+1 with amplitude weights
    # (1/4, 1/2, 1/4), so the single bin holds exactly 2/3 of the energy
    # and the 3-bin lobe holds essentially all of it
    assert int(np.argmax(mags)) == k
    assert mags[k] / np.sum(mags) > 0.60
    assert np.sum(mags[k - 1 : k + 2]) / np.sum(mags) > 0.95


def test_zero_and_linearity():
    cfg = StftConfig()
    assert np.all(stft(np.zeros(2048), cfg) == 0)
    x, y = white(3000, 1), white(3000, 2)
    lhs = stft(2.5 * x - 0.7 * y, cfg)
    rhs = 2.5 * stft(x, cfg) - 0.7 * stft(y, cfg)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


def test_roundtrip_white_noise_snr():
    cfg = StftConfig()
    x = white(FS, seed=3)
    y = istft(stft(x, cfg), cfg, length=x.size)
    assert interior_snr_db(x, y, 512) > 60


def test_roundtrip_chirp_max_error():
    cfg = StftConfig()
    t = np.arange(FS) / FS
    x = 0.5 * np.sin(2 * np.pi * (200 * t + 1500 * t**2))
    y = istft(stft(x, cfg), cfg, length=x.size)
    assert np.max(np.abs((x - y)[512:-512])) < 1e-4


def test_istft_zero_spec():
    cfg = StftConfig()
    y = istft(np.zeros((32, cfg.n_bins), dtype=complex), cfg)
    assert np.all(y == 0)
    assert y.size == 512 + 31 * 128


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(min_value=2048, max_value=20000),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_roundtrip_property(n, seed):
    cfg = StftConfig()
    x = white(n, seed=seed)
    y = istft(stft(x, cfg), cfg, length=n)
    assert interior_snr_db(x, y, 512) > 60


def test_parseval_energy_factor():
    cfg = StftConfig()
    # interior-supported signal: windows fully overlap wherever energy lives
    x = np.zeros(FS)
    x[512:-512] = white(FS - 1024, seed=9)
    s = stft(x, cfg)
    weights = np.full(cfg.n_bins, 2.0)
    weights[0] = weights[-1] = 1.0
    spec_energy = np.sum(weights * np.abs(s) ** 2)
    wave_energy = np.sum(x**2)
    assert spec_energy / cfg.energy_norm_factor() == pytest.approx(
        wave_energy, rel=1e-3
    )


def test_envelope_sine_amplitude():
    t = np.arange(FS) / FS
    e = envelope(0.5 * np.sin(2 * np.pi * 440 * t))
    interior = e[800:-800]
    assert np.all(np.abs(interior - 0.5) < 0.025)


def test_envelope_trivials():
    x = white(4000, seed=5)
    assert np.allclose(envelope(-x), envelope(x))
    assert np.allclose(envelope(np.zeros(100)), 0)
    with pytest.raises(ValueError):
        envelope(np.array([]))


def test_plane_packing_roundtrip():
    s = stft(white(4000, 7), StftConfig())
    back = planes_to_spec(spec_to_planes(s))
    assert np.max(np.abs(back - s)) < 1e-6


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.array([]))
    with pytest.raises(ValueError):
        Waveform(np.ones(4), sample_rate=0)


def test_binaural_validation():
    a = Waveform(np.ones(8))
    with pytest.raises(ValueError):
        Binaural(a, Waveform(np.ones(9)))
    with pytest.raises(ValueError):
        Binaural(a, Waveform(np.ones(8), sample_rate=8000))
    b = Binaural(a, Waveform(np.zeros(8)))
    assert b.as_array().shape == (2, 8)
