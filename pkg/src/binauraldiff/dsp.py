"""Time-frequency kernels and core audio containers.

Everything downstream (simulator, autoencoder, metrics) sits on the STFT
defined here. The transform is exactly invertible on interior samples via
weighted overlap-add, which is what lets spectrogram-domain models be checked
against waveform-domain oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.signal

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    """Single-channel audio: float samples plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("Waveform needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class Binaural:
    """Two-channel audio with equal length and sample rate per channel."""

    left: Waveform
    right: Waveform

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("left/right length mismatch")
        if self.left.sample_rate != self.right.sample_rate:
            raise ValueError("left/right sample rate mismatch")

    @property
    def sample_rate(self) -> int:
        return self.left.sample_rate

    def __len__(self) -> int:
        return len(self.left)

    def as_array(self) -> np.ndarray:
        """Stack to shape [2, length], left first."""
        return np.stack([self.left.samples, self.right.samples])

    @staticmethod
    def from_array(arr: np.ndarray, sample_rate: int) -> "Binaural":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise ValueError("expected array of shape [2, length]")
        return Binaural(Waveform(arr[0], sample_rate), Waveform(arr[1], sample_rate))


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window; sum of squares is exactly 3n/8."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


@dataclass
class StftConfig:
    """Analysis setup: window length, hop, and the (Hann) window itself.

    Validation rejects window/hop pairs whose squared-window overlap-add is
    not constant on interior samples, since the inverse transform divides by
    that profile and only a flat profile gives hop-invariant reconstruction.
    """

    window_size: int = 512
    hop: int = 128
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.window is None:
            self.window = hann_window(self.window_size)
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.hop <= 0 or self.hop > self.window_size:
            raise ValueError("need 0 < hop <= window_size")
        if self.window.shape != (self.window_size,):
            raise ValueError("window length must equal window_size")
        profile = self._overlap_profile(4 * self.window_size)
        interior = profile[self.window_size : -self.window_size]
        flat = np.max(np.abs(interior - interior[0])) <= 1e-9 * max(interior[0], 1e-30)
        if not flat or interior[0] <= 0:
            raise ValueError(
                "window/hop fails constant squared-overlap-add; "
                "inverse transform would be hop-dependent"
            )

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_size:
            raise ValueError("input too short: need at least one full window")
        return 1 + (n_samples - self.window_size) // self.hop

    def _overlap_profile(self, n_samples: int) -> np.ndarray:
        """Sum of squared windows at every hop offset covering n_samples."""
        n_frames = self.n_frames(n_samples)
        prof = np.zeros(n_samples)
        w2 = self.window**2
        for m in range(n_frames):
            prof[m * self.hop : m * self.hop + self.window_size] += w2
        return prof

    def energy_norm_factor(self) -> float:
        """Parseval factor: spectrogram energy / this = waveform energy.

        For one frame, sum_f c_f |X_f|^2 = window_size * sum_n (w x)^2 with
        c_f doubling the one-sided interior bins; summing frames multiplies
        interior waveform energy by sum(w^2)/hop.
        """
        return self.window_size * float(np.sum(self.window**2)) / self.hop


def stft(w: Waveform | np.ndarray, cfg: StftConfig | None = None) -> np.ndarray:
    """Complex spectrogram, shape [n_frames, n_bins]. Frames lie fully inside
    the signal; no padding is added."""
    cfg = cfg or StftConfig()
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    n_frames = cfg.n_frames(x.size)
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * cfg.window[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(
    spec: np.ndarray, cfg: StftConfig | None = None, length: int | None = None
) -> np.ndarray:
    """Weighted overlap-add inverse of stft.

    Interior samples are recovered to float precision; the first and last
    window of samples are attenuated where the analysis windows only
    partially overlap (the Hann endpoints carry no energy at all).
    """
    cfg = cfg or StftConfig()
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError(f"expected spectrogram [n_frames, {cfg.n_bins}]")
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.window_size, axis=1) * cfg.window[None, :]
    n_out = cfg.window_size + (n_frames - 1) * cfg.hop
    y = np.zeros(n_out)
    prof = np.zeros(n_out)
    w2 = cfg.window**2
    for m in range(n_frames):
        sl = slice(m * cfg.hop, m * cfg.hop + cfg.window_size)
        y[sl] += frames[m]
        prof[sl] += w2
    y /= np.maximum(prof, 1e-12)
    if length is not None:
        if length <= n_out:
            y = y[:length]
        else:
            y = np.concatenate([y, np.zeros(length - n_out)])
    return y


def envelope(w: Waveform | np.ndarray) -> np.ndarray:
    """Amplitude envelope: magnitude of the analytic signal."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty input")
    return np.abs(scipy.signal.hilbert(x))


def spec_to_planes(spec: np.ndarray) -> np.ndarray:
    """Complex [T, F] -> real planes [2, T, F] (real, imaginary)."""
    return np.stack([spec.real, spec.imag]).astype(np.float32)


def planes_to_spec(planes: np.ndarray) -> np.ndarray:
    """Real planes [2, T, F] -> complex [T, F]."""
    if planes.ndim != 3 or planes.shape[0] != 2:
        raise ValueError("expected planes of shape [2, T, F]")
    return planes[0].astype(np.float64) + 1j * planes[1].astype(np.float64)
