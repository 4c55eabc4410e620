"""
Waveform I/O, loudness / PSD distortion measurements and perturbation
injection.

Only one audio format is supported: RIFF/WAVE, PCM16, mono, 16 kHz.
Everything here is a pure function over immutable numpy arrays.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadFraming,
    CorruptFile,
    EmptySignal,
    LengthMismatch,
    SilentSignal,
    UnsupportedFormat,
)

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz signal with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_path: Optional[str] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise UnsupportedFormat(f"expected 1-D samples, got shape {s.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormat(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate, self.source_path)


@dataclass(frozen=True)
class Perturbation:
    """Additive perturbation delta; ``loudness_db_rel`` is cached when known."""

    delta: np.ndarray
    loudness_db_rel: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim != 1:
            raise ValueError("perturbation must be 1-D")
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)

    def __len__(self) -> int:
        return self.delta.size

    @classmethod
    def zeros(cls, n: int) -> "Perturbation":
        return cls(np.zeros(n))

    def as_waveform(self) -> Waveform:
        return Waveform(self.delta)


def load_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            if fh.getcomptype() != "NONE":
                raise UnsupportedFormat(f"{path}: compressed WAV not supported")
            if channels != 1 or width != 2 or rate != SAMPLE_RATE:
                raise UnsupportedFormat(
                    f"{path}: need mono PCM16 at {SAMPLE_RATE} Hz, got "
                    f"{channels} ch, {8 * width} bit, {rate} Hz"
                )
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise CorruptFile(f"{path}: truncated file") from exc
    if len(raw) != 2 * n:
        raise CorruptFile(f"{path}: expected {n} frames, found {len(raw) // 2}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, SAMPLE_RATE, str(path))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid; +1.0 clamps to 32767."""
    q = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def save_wav(w: Waveform, path) -> None:
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(to_pcm16(w.samples).tobytes())


def _peak(samples: np.ndarray) -> float:
    if samples.size == 0:
        raise SilentSignal("empty signal has no loudness")
    peak = float(np.max(np.abs(samples)))
    if peak == 0.0:
        raise SilentSignal("loudness of an all-zero signal is undefined")
    return peak


def loudness_db(w) -> float:
    """Peak loudness ``20*log10(max|x|)``; accepts a Waveform, Perturbation or array."""
    return 20.0 * np.log10(_peak(_samples_of(w)))


def relative_loudness_db(x: Waveform, d: Perturbation) -> float:
    """Loudness of the perturbation relative to the signal it rides on."""
    _check_lengths(x, d)
    return loudness_db(d) - loudness_db(x)


def _samples_of(obj) -> np.ndarray:
    if isinstance(obj, Waveform):
        return obj.samples
    if isinstance(obj, Perturbation):
        return obj.delta
    return np.asarray(obj, dtype=np.float64)


def _check_lengths(x, d) -> None:
    if len(_samples_of(x)) != len(_samples_of(d)):
        raise LengthMismatch(f"lengths differ: {len(_samples_of(x))} vs {len(_samples_of(d))}")


def psd(w, frame_len: int, hop: int) -> np.ndarray:
    """Framed Hann-windowed periodogram, shape (frames, frame_len // 2 + 1).

    Each entry is ``|DFT(hann * frame)|**2 / frame_len``.
    """
    s = _samples_of(w)
    if s.size == 0:
        raise EmptySignal("cannot frame an empty signal")
    if frame_len < 1 or hop < 1 or frame_len > s.size:
        raise BadFraming(f"frame_len={frame_len}, hop={hop} invalid for {s.size} samples")
    n_frames = 1 + (s.size - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(frame_len) if frame_len > 1 else np.ones(1)
    spectrum = np.fft.rfft(s[idx] * window, axis=1)
    return np.abs(spectrum) ** 2 / frame_len


def psd_distortion_grid(x: Waveform, d: Perturbation, frame_len: int, hop: int,
                        floor: float = 1e-300) -> np.ndarray:
    """Per-bin ``10 log10 |rho_d|^2 - 10 log10 |rho_x|^2`` (floored, never infinite)."""
    _check_lengths(x, d)
    px = psd(x, frame_len, hop)
    pd = psd(d, frame_len, hop)
    return 20.0 * (np.log10(np.maximum(pd, floor)) - np.log10(np.maximum(px, floor)))


def psd_distortion_db(x: Waveform, d: Perturbation, frame_len: int, hop: int) -> float:
    """Worst-case PSD distortion: bins are reduced by max before taking the ratio."""
    _check_lengths(x, d)
    px = float(np.max(psd(x, frame_len, hop)))
    pd = float(np.max(psd(d, frame_len, hop)))
    if px == 0.0:
        raise SilentSignal("reference signal has an all-zero PSD")
    if pd == 0.0:
        raise SilentSignal("perturbation has an all-zero PSD")
    return 10.0 * np.log10(pd**2) - 10.0 * np.log10(px**2)


def inject_perturbation(x: Waveform, d: Perturbation, clamp: bool = True) -> Waveform:
    _check_lengths(x, d)
    out = x.samples + d.delta
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return Waveform(out, x.sample_rate, x.source_path)


def snr_db(reference: np.ndarray, estimate: np.ndarray, align_gain: bool = True) -> float:
    """SNR of ``estimate`` against ``reference``; optional least-squares gain alignment."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise LengthMismatch(f"{ref.shape} vs {est.shape}")
    if align_gain:
        denom = float(est @ est)
        if denom > 0:
            est = est * (float(ref @ est) / denom)
    noise = float(np.sum((ref - est) ** 2))
    power = float(np.sum(ref**2))
    if power == 0.0:
        raise SilentSignal("reference is silent")
    if noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(power / noise)
