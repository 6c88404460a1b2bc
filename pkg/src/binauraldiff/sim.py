"""Parametric binaural renderer and procedural mono sources.

The renderer is the dataset factory: it turns a mono source plus a 3D
position into two ear signals carrying interaural time and level
differences, a distance attenuation, an elevation-swept notch, and a
behind-the-head lowpass. Every cue is simple enough that the evaluation
oracles can recover it from the rendered audio alone, which is what the
closure tests rely on.

Conventions: azimuth in (-pi, pi], 0 = straight ahead, positive = left;
elevation in [-pi/2, pi/2], positive = above; receiver at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .dsp import Binaural, Waveform

SOUND_CLASSES = ("tone", "chirp", "speech_like", "noise_burst", "click_train")

# octant boundary tolerance: exactly-on-axis components use the tie rule
_TIE_EPS = 1e-12


@dataclass
class SourceSpec:
    """One sound source: procedural class, display label, and 3D position."""

    class_id: int
    label: str
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not 0 <= self.class_id < len(SOUND_CLASSES):
            raise ValueError(f"unknown class_id {self.class_id}")
        if not -math.pi < self.azimuth <= math.pi:
            raise ValueError("azimuth must lie in (-pi, pi]")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError("elevation must lie in [-pi/2, pi/2]")
        if not 0.5 <= self.distance <= 10.0:
            raise ValueError("distance must lie in [0.5, 10] m")

    def position(self) -> np.ndarray:
        """Cartesian (front, left, up) coordinates in meters."""
        ce = math.cos(self.elevation)
        return self.distance * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth),
             math.sin(self.elevation)]
        )


@dataclass
class Scene:
    """One or two sources around a fixed listener at the origin."""

    sources: tuple

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not 1 <= len(self.sources) <= 2:
            raise ValueError("scene needs 1 or 2 sources")
        ids = [s.class_id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ValueError("scene sources must have distinct class_ids")


@dataclass
class RenderConfig:
    speed_of_sound: float = 343.0
    ear_spacing: float = 0.18
    ref_distance: float = 1.0
    elevation_notch_base: float = 6000.0
    elevation_notch_span: float = 3000.0
    back_lowpass_cutoff: float = 6000.0
    # filter sharpness and delay-line headroom; not spatial cues themselves
    elevation_notch_q: float = 2.0
    back_lowpass_q: float = 0.7071
    base_delay_samples: float = 8.0
    ild_max_db: float = 3.0
    peak_headroom: float = 0.99

    def __post_init__(self):
        for name in ("speed_of_sound", "ear_spacing", "ref_distance",
                     "elevation_notch_base", "elevation_notch_span",
                     "back_lowpass_cutoff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def fractional_delay(x: np.ndarray, delay: float, taps: int = 16) -> np.ndarray:
    """Delay x by a non-integer number of samples via windowed-sinc
    interpolation. Output has the same length; the shifted-in samples are
    zero. Integer delays reduce to an exact shift."""
    if delay < 0:
        raise ValueError("delay must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    half = taps // 2
    i0 = int(math.floor(delay)) - half + 1
    u = i0 + np.arange(taps) - delay
    h = np.sinc(u) * (0.5 + 0.5 * np.cos(np.pi * u / half))
    c = np.convolve(x, h)
    y = np.zeros_like(x)
    lo = max(0, i0)
    hi = min(x.size, c.size + i0)
    y[lo:hi] = c[lo - i0 : hi - i0]
    return y


def _biquad_notch(f0: float, q: float, fs: float):
    w0 = 2.0 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2.0 * q)
    b = np.array([1.0, -2.0 * math.cos(w0), 1.0])
    a = np.array([1.0 + alpha, -2.0 * math.cos(w0), 1.0 - alpha])
    return b / a[0], a / a[0]


def _biquad_lowpass(f0: float, q: float, fs: float):
    w0 = 2.0 * math.pi * f0 / fs
    cw = math.cos(w0)
    alpha = math.sin(w0) / (2.0 * q)
    b = np.array([(1 - cw) / 2, 1 - cw, (1 - cw) / 2])
    a = np.array([1 + alpha, -2 * cw, 1 - alpha])
    return b / a[0], a / a[0]


def render_source(mono: Waveform, s: SourceSpec, cfg: RenderConfig | None = None
                  ) -> Binaural:
    """Render one source to two ears.

    Cue order: fractional interaural delay around a fixed base delay, then
    the level difference, then the elevation notch, then the back lowpass
    for rear sources, then 1/max(distance, ref_distance) attenuation.
    Negating azimuth swaps the two output channels sample-exactly because
    every left-channel expression at -azimuth equals the right-channel
    expression at +azimuth.
    """
    cfg = cfg or RenderConfig()
    fs = mono.sample_rate
    x = mono.samples
    sin_az = math.sin(s.azimuth)
    itd_samples = cfg.ear_spacing * sin_az / cfg.speed_of_sound * fs
    left = fractional_delay(x, cfg.base_delay_samples - itd_samples / 2.0)
    right = fractional_delay(x, cfg.base_delay_samples + itd_samples / 2.0)
    ild_db = cfg.ild_max_db * sin_az
    left = left * 10.0 ** (ild_db / 20.0)
    right = right * 10.0 ** (-ild_db / 20.0)
    notch_f = cfg.elevation_notch_base + cfg.elevation_notch_span * (
        2.0 * s.elevation / math.pi
    )
    notch_f = min(notch_f, 0.95 * fs / 2.0)
    b, a = _biquad_notch(notch_f, cfg.elevation_notch_q, fs)
    left = scipy.signal.lfilter(b, a, left)
    right = scipy.signal.lfilter(b, a, right)
    if abs(s.azimuth) > math.pi / 2:
        b, a = _biquad_lowpass(cfg.back_lowpass_cutoff, cfg.back_lowpass_q, fs)
        left = scipy.signal.lfilter(b, a, left)
        right = scipy.signal.lfilter(b, a, right)
    atten = 1.0 / max(s.distance, cfg.ref_distance)
    return Binaural(Waveform(left * atten, fs), Waveform(right * atten, fs))


def mix_scene(scene: Scene, monos: list, cfg: RenderConfig | None = None
              ) -> tuple[Binaural, float]:
    """Sum per-source renders; returns (binaural, gain) where gain is the
    global scale applied to keep the peak under cfg.peak_headroom (1.0 when
    no scaling was needed). Callers record the gain in dataset metadata."""
    cfg = cfg or RenderConfig()
    if len(monos) == 0:
        raise ValueError("empty mono list")
    if len(monos) != len(scene.sources):
        raise ValueError("need one mono waveform per scene source")
    lengths = {len(m) for m in monos}
    rates = {m.sample_rate for m in monos}
    if len(lengths) != 1 or len(rates) != 1:
        raise ValueError("mono waveforms must share length and sample rate")
    acc = None
    for mono, src in zip(monos, scene.sources):
        r = render_source(mono, src, cfg).as_array()
        acc = r if acc is None else acc + r
    peak = float(np.max(np.abs(acc)))
    gain = 1.0 if peak <= cfg.peak_headroom else cfg.peak_headroom / peak
    acc = acc * gain
    return Binaural.from_array(acc, monos[0].sample_rate), gain


def mono_downmix(b: Binaural) -> Waveform:
    """Sum of the two channels."""
    return Waveform(b.left.samples + b.right.samples, b.sample_rate)


def channel_difference(b: Binaural) -> Waveform:
    """Left minus right."""
    return Waveform(b.left.samples - b.right.samples, b.sample_rate)


def reconstruct_binaural(mono: Waveform, diff: Waveform) -> Binaural:
    """Invert (sum, difference): left = (mono+diff)/2, right = (mono-diff)/2."""
    if len(mono) != len(diff):
        raise ValueError("length mismatch between mono and difference")
    if mono.sample_rate != diff.sample_rate:
        raise ValueError("sample rate mismatch")
    left = (mono.samples + diff.samples) / 2.0
    right = (mono.samples - diff.samples) / 2.0
    return Binaural(Waveform(left, mono.sample_rate), Waveform(right, mono.sample_rate))


def octant_of(s: SourceSpec) -> tuple[str, str, str]:
    """Direction labels (lr, fb, ab) from the signs of sin(azimuth),
    cos(azimuth), and elevation. Components within 1e-12 of zero take the
    tie values (right, front, above)."""
    sin_az = math.sin(s.azimuth)
    cos_az = math.cos(s.azimuth)
    lr = "left" if sin_az > _TIE_EPS else "right"
    fb = "behind" if cos_az < -_TIE_EPS else "front"
    ab = "below" if s.elevation < -_TIE_EPS else "above"
    return lr, fb, ab


def _bandpass_noise(rng, n: int, lo: float, hi: float, fs: float) -> np.ndarray:
    x = rng.standard_normal(n)
    sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return scipy.signal.sosfilt(sos, x)


def synth_source_signal(class_id: int, duration: float, rng,
                        sample_rate: int = 16000) -> Waveform:
    """Procedural mono source, RMS-normalized to 0.1, deterministic per
    (class_id, seed). Classes occupy separated spectral-centroid bands so
    two classes are distinguishable by spectrum alone."""
    if not 0 <= class_id < len(SOUND_CLASSES):
        raise ValueError(f"unknown class_id {class_id}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = int(round(duration * sample_rate))
    if n < sample_rate // 100:
        raise ValueError("duration too short")
    t = np.arange(n) / sample_rate
    if class_id == 0:  # tone: fundamental 200-800 Hz plus a weak 2nd harmonic
        f0 = rng.uniform(200.0, 800.0)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        x = np.sin(2 * np.pi * f0 * t + ph[0]) + 0.3 * np.sin(4 * np.pi * f0 * t + ph[1])
    elif class_id == 1:  # chirp sweeping 1.0-2.5 kHz
        f_lo = rng.uniform(950.0, 1050.0)
        f_hi = rng.uniform(2400.0, 2600.0)
        x = np.sin(2 * np.pi * (f_lo * t + (f_hi - f_lo) / (2 * duration) * t**2))
    elif class_id == 2:  # speech-like: band noise with syllabic amplitude modulation
        carrier = _bandpass_noise(rng, n, 300.0, 2200.0, sample_rate)
        f_am = rng.uniform(2.5, 5.0)
        x = carrier * (0.55 + 0.45 * np.sin(2 * np.pi * f_am * t + rng.uniform(0, 2 * np.pi)))
    elif class_id == 3:  # gated high-band noise bursts
        x = _bandpass_noise(rng, n, 3000.0, 5500.0, sample_rate)
        gate = np.zeros(n)
        pos = 0
        while pos < n:
            burst = int(rng.uniform(0.15, 0.25) * sample_rate)
            gap = int(rng.uniform(0.08, 0.2) * sample_rate)
            gate[pos : pos + burst] = 1.0
            pos += burst + gap
        ramp = int(0.008 * sample_rate)
        kernel = np.ones(ramp) / ramp
        x = x * np.convolve(gate, kernel, mode="same")
    else:  # click train: sparse decaying high-frequency clicks
        rate = rng.uniform(8.0, 14.0)
        click_len = int(0.003 * sample_rate)
        decay = np.exp(-np.arange(click_len) / (0.001 * sample_rate))
        click = rng.standard_normal(click_len) * decay
        sos = scipy.signal.butter(4, 4800.0, btype="highpass", fs=sample_rate,
                                  output="sos")
        click = scipy.signal.sosfilt(sos, click)
        x = np.zeros(n)
        pos = rng.uniform(0.0, 1.0 / rate)
        while True:
            i = int(pos * sample_rate)
            if i + click_len > n:
                break
            x[i : i + click_len] += click
            pos += 1.0 / rate * rng.uniform(0.85, 1.15)
    # fade edges to avoid onset discontinuities, then pin RMS exactly
    ramp = max(1, int(0.01 * sample_rate))
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    x = x * env
    rms = np.sqrt(np.mean(x**2))
    if rms < 1e-12:
        raise RuntimeError("synthesized signal is silent; cannot normalize")
    return Waveform(x * (0.1 / rms), sample_rate)
