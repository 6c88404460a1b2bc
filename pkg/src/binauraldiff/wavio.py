"""Minimal RIFF/WAVE reader and writer.

Supports exactly what the pipeline needs: PCM16 and IEEE float32, mono or
stereo. float32 round trips bit-faithfully; PCM16 round trips exactly at
16-bit quantization. Anything else raises WavFormatError naming the chunk
or field that was rejected.
"""
from __future__ import annotations

import struct

import numpy as np

from .dsp import Binaural, Waveform

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3


class WavFormatError(ValueError):
    pass


def _read_chunks(blob: bytes):
    """Yield (chunk_id, payload) for every top-level chunk in the RIFF body."""
    pos = 0
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        pos += 8
        if pos + size > len(blob):
            raise WavFormatError(f"chunk {cid!r} overruns file")
        yield cid, blob[pos : pos + size]
        pos += size + (size & 1)  # chunks are word-aligned


def read_wav(path) -> Binaural | Waveform:
    """Read a WAV file; stereo becomes Binaural, mono becomes Waveform."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, body in _read_chunks(data[12:]):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("chunk 'fmt ' too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise WavFormatError("missing chunk 'fmt '")
    if payload is None:
        raise WavFormatError("missing chunk 'data'")
    tag, n_channels, sample_rate, _byte_rate, block_align, bits = fmt
    if tag == WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(
            f"chunk 'fmt ': unsupported encoding (format tag {tag}, {bits}-bit)"
        )
    if n_channels not in (1, 2):
        raise WavFormatError(f"chunk 'fmt ': unsupported channel count {n_channels}")
    if block_align != n_channels * bits // 8:
        raise WavFormatError("chunk 'fmt ': block alignment inconsistent")
    frames = samples.reshape(-1, n_channels)
    if n_channels == 1:
        return Waveform(frames[:, 0], sample_rate)
    return Binaural(
        Waveform(frames[:, 0], sample_rate), Waveform(frames[:, 1], sample_rate)
    )


def read_binaural(path) -> Binaural:
    audio = read_wav(path)
    if not isinstance(audio, Binaural):
        raise WavFormatError("expected 2 channels")
    return audio


def read_mono(path) -> Waveform:
    audio = read_wav(path)
    if not isinstance(audio, Waveform):
        raise WavFormatError("expected 1 channel")
    return audio


def write_wav(path, audio: Binaural | Waveform, encoding: str = "float32") -> None:
    """Write mono or stereo WAV. encoding is 'float32' or 'pcm16'."""
    if isinstance(audio, Binaural):
        frames = audio.as_array().T
        sample_rate = audio.sample_rate
    elif isinstance(audio, Waveform):
        frames = audio.samples[:, None]
        sample_rate = audio.sample_rate
    else:
        raise TypeError("audio must be Binaural or Waveform")
    n_channels = frames.shape[1]
    if encoding == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = frames.astype("<f4").tobytes()
    elif encoding == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        clipped = np.clip(np.round(frames * 32768.0), -32768, 32767)
        payload = clipped.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block_align = n_channels * bits // 8
    fmt_body = struct.pack(
        "<HHIIHH", tag, n_channels, sample_rate, sample_rate * block_align,
        block_align, bits,
    )
    if tag == WAVE_FORMAT_IEEE_FLOAT:
        # non-PCM formats carry a cbSize field and a fact chunk
        fmt_body += struct.pack("<H", 0)
        fact = struct.pack("<4sII", b"fact", 4, frames.shape[0])
    else:
        fact = b""
    chunks = struct.pack("<4sI", b"fmt ", len(fmt_body)) + fmt_body
    chunks += fact
    chunks += struct.pack("<4sI", b"data", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    with open(path, "wb") as f:
        f.write(struct.pack("<4sI4s", b"RIFF", 4 + len(chunks), b"WAVE"))
        f.write(chunks)
