"""Waveform container, STFT/iSTFT, level normalisation and WAV I/O.

All analysis uses a square-root periodic Hann window for both analysis and
synthesis, which is perfect-reconstruction at 50% overlap. Frames are
centred: the signal is reflect-padded by ``frame_len // 2`` on both ends, so a
signal of ``N`` samples gives ``T = 1 + N // hop_len`` frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("mono required: waveform must be 1-D")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def zeros(cls, n: int, sample_rate: int = SAMPLE_RATE) -> "Waveform":
        return cls(np.zeros(n), sample_rate)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop_len: int = 256
    fft_size: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if not (0 < self.hop_len <= self.frame_len <= self.fft_size):
            raise AudioError(
                f"need 0 < hop_len <= frame_len <= fft_size, got "
                f"{self.hop_len}, {self.frame_len}, {self.fft_size}")
        if self.window != "sqrt_hann":
            raise AudioError(f"unsupported window {self.window!r}")
        env = _cola_envelope(self.window_array(), self.hop_len)
        if env.min() <= 1e-8:
            raise AudioError("window/hop combination violates the overlap-add condition")

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_len

    def window_array(self) -> np.ndarray:
        return np.sqrt(np.hanning(self.frame_len + 1)[:-1])


def _cola_envelope(win: np.ndarray, hop: int) -> np.ndarray:
    """Steady-state sum of squared, hop-shifted copies of ``win``."""
    env = np.zeros(hop)
    w2 = win ** 2
    for start in range(0, len(win), hop):
        chunk = w2[start:start + hop]
        env[:len(chunk)] += chunk
    return env


@dataclass
class ComplexSpec:
    values: np.ndarray  # (T, F) complex
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def shape(self):
        return self.values.shape


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if len(x) > pad:
        return np.pad(x, pad, mode="reflect")
    return np.pad(x, pad, mode="constant")


def stft(w: Waveform | np.ndarray, c: StftConfig | None = None) -> ComplexSpec:
    c = c or StftConfig()
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise AudioError("cannot transform an empty waveform")
    pad = c.frame_len // 2
    xp = _pad(x, pad)
    n_frames = c.n_frames(len(x))
    need = (n_frames - 1) * c.hop_len + c.frame_len
    if len(xp) < need:
        xp = np.pad(xp, (0, need - len(xp)))
    idx = np.arange(c.frame_len)[None, :] + c.hop_len * np.arange(n_frames)[:, None]
    frames = xp[idx] * c.window_array()[None, :]
    return ComplexSpec(np.fft.rfft(frames, n=c.fft_size, axis=1), c)


def istft(s: ComplexSpec, out_len: int) -> Waveform:
    c = s.config
    n_frames = s.values.shape[0]
    if s.values.shape[1] != c.n_freqs:
        raise AudioError(f"expected {c.n_freqs} frequency bins, got {s.values.shape[1]}")
    if abs(c.n_frames(out_len) - n_frames) > 1:
        raise AudioError(
            f"out_len={out_len} implies {c.n_frames(out_len)} frames, spectrogram has {n_frames}")
    win = c.window_array()
    frames = np.fft.irfft(s.values, n=c.fft_size, axis=1)[:, :c.frame_len] * win[None, :]
    total = (n_frames - 1) * c.hop_len + c.frame_len
    out = np.zeros(total)
    env = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * c.hop_len, t * c.hop_len + c.frame_len)
        out[sl] += frames[t]
        env[sl] += win ** 2
    pad = c.frame_len // 2
    out = out[pad:pad + out_len]
    env = env[pad:pad + out_len]
    if len(out) < out_len:
        raise AudioError(f"spectrogram too short for out_len={out_len}")
    nz = env > 1e-10
    out[nz] /= env[nz]
    return Waveform(out)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def rms_db(x: np.ndarray) -> float:
    return 20.0 * np.log10(rms(x))


def rms_scale(w: Waveform, target_db_range=(-25.0, -20.0), rng=None) -> Waveform:
    """Scale ``w`` so its RMS level (dBFS) is drawn uniformly from the range."""
    lo, hi = target_db_range
    if lo > hi:
        raise AudioError(f"empty level range [{lo}, {hi}]")
    level = rms(w.samples)
    if level == 0.0:
        raise AudioError("cannot scale a silent waveform")
    if lo == hi:
        target = lo
    else:
        rng = rng if rng is not None else np.random.default_rng()
        target = rng.uniform(lo, hi)
    gain = 10.0 ** (target / 20.0) / level
    return Waveform(w.samples * gain, w.sample_rate)


def load_wav(path) -> Waveform:
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise AudioError(f"mono required: {path} has {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV encoding {data.dtype} in {path}")
    return Waveform(samples, int(sr))


def save_wav(path, w: Waveform, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise AudioError(f"unsupported WAV subtype {subtype!r}")
    wavfile.write(path, w.sample_rate, data)
