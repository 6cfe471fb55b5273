"""Speech sources: a WAV-directory corpus and a synthetic stand-in.

A WAV corpus lays utterances out as ``<root>/<speaker_id>/<anything>.wav``
(mono, 16 kHz). Speakers are assigned to train/valid/test by sorted id so
the three splits never share a speaker.

The synthetic corpus produces voiced, syllable-like harmonic signals with a
speaker-dependent pitch range and formant envelope. It exists so the whole
pipeline runs and can be tested without an external speech corpus.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioError, Waveform, load_wav

SPLITS = ("train", "valid", "test")
DATA_ROOT_ENV = "DIST_TSE_DATA_ROOT"


def fit_length(x: np.ndarray, n: int, rng=None, min_rel_db=-20.0, tries=20) -> np.ndarray:
    """Random crop when longer than ``n``, zero-pad at the end when shorter.

    Random crops are redrawn (up to ``tries`` times, keeping the loudest)
    while their mean power sits more than ``min_rel_db`` below that of the
    whole signal, so short clips do not land in a pause.
    """
    if len(x) <= n:
        return np.pad(x, (0, n - len(x)))
    if rng is None:
        return x[:n]
    ref = np.mean(np.square(x)) * 10.0 ** (min_rel_db / 10.0)
    best, best_p = None, -1.0
    for _ in range(tries):
        start = int(rng.integers(0, len(x) - n + 1))
        p = np.mean(np.square(x[start:start + n]))
        if p > best_p:
            best, best_p = start, p
        if p >= ref:
            break
    return x[best:best + n]


def split_speakers(speakers, counts):
    speakers = sorted(speakers)
    if sum(counts) > len(speakers):
        raise ValueError(f"corpus has {len(speakers)} speakers, split needs {sum(counts)}")
    out, start = {}, 0
    for name, c in zip(SPLITS, counts):
        out[name] = speakers[start:start + c]
        start += c
    return out


class WavCorpus:
    def __init__(self, root=None, speakers_per_split=(128, 48, 64), sample_rate=SAMPLE_RATE):
        root = root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ValueError(f"no corpus root given and {DATA_ROOT_ENV} is unset")
        self.root = Path(root)
        self.sample_rate = sample_rate
        files = {}
        for wav in sorted(self.root.glob("*/*.wav")):
            files.setdefault(wav.parent.name, []).append(wav)
        if not files:
            raise ValueError(f"no <speaker>/<utt>.wav files under {self.root}")
        self.files = files
        self.splits = split_speakers(files, speakers_per_split)

    def speakers(self, split):
        return self.splits[split]

    def utterance(self, speaker, index) -> Waveform:
        paths = self.files[speaker]
        w = load_wav(paths[index % len(paths)])
        if w.sample_rate != self.sample_rate:
            raise AudioError(f"{paths[index % len(paths)]}: expected {self.sample_rate} Hz")
        return w

    def n_utterances(self, speaker):
        return len(self.files[speaker])


class SyntheticCorpus:
    def __init__(self, speakers_per_split=(128, 48, 64), utterances_per_speaker=50,
                 utterance_len=5.0, seed=0, sample_rate=SAMPLE_RATE):
        self.sample_rate = sample_rate
        self.utterance_len = utterance_len
        self.seed = seed
        self.per_speaker = utterances_per_speaker
        names = [f"syn{i:04d}" for i in range(sum(speakers_per_split))]
        self.splits = split_speakers(names, speakers_per_split)

    def speakers(self, split):
        return self.splits[split]

    def n_utterances(self, speaker):
        return self.per_speaker

    def _voice(self, speaker):
        rng = np.random.default_rng([self.seed, int(speaker[3:]), 0])
        f0 = rng.uniform(85.0, 240.0)
        formants = np.sort(rng.uniform([300, 900, 2000], [900, 2200, 3400]))
        return f0, formants

    def utterance(self, speaker, index) -> Waveform:
        fs = self.sample_rate
        f0_base, formants = self._voice(speaker)
        rng = np.random.default_rng([self.seed, int(speaker[3:]), 1 + index % self.per_speaker])
        n = int(self.utterance_len * fs)
        out = np.zeros(n)
        pos = int(rng.uniform(0.0, 0.3) * fs)
        while pos < n:
            # a word: 1-3 syllables, then a longer pause
            for _ in range(int(rng.integers(1, 4))):
                dur = int(rng.uniform(0.08, 0.25) * fs)
                end = min(pos + dur, n)
                out[pos:end] += self._syllable(rng, dur, f0_base, formants)[:end - pos]
                pos = end + int(rng.uniform(0.01, 0.06) * fs)
                if pos >= n:
                    break
            pos += int(rng.uniform(0.1, 0.45) * fs)
        if not np.any(out):
            out[: n // 4] = self._syllable(rng, n // 4, f0_base, formants)
        return Waveform(out / (np.max(np.abs(out)) + 1e-9) * 0.5, fs)

    def _syllable(self, rng, dur, f0_base, formants):
        fs = self.sample_rate
        t = np.arange(dur) / fs
        f0 = f0_base * (1.0 + rng.uniform(-0.15, 0.15) + rng.uniform(-0.1, 0.1) * t / t[-1])
        phase = 2 * np.pi * np.cumsum(f0) / fs
        shift = rng.uniform(0.85, 1.15, size=3)
        sig = np.zeros(dur)
        n_harm = int(4000 // (f0_base * 1.3))
        for h in range(1, n_harm + 1):
            freq = h * f0_base
            gain = sum(np.exp(-0.5 * ((freq - f * s) / 90.0) ** 2) for f, s in zip(formants, shift))
            sig += (gain + 0.005) / h ** 0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        env = np.sin(np.pi * np.arange(dur) / dur) ** 0.6
        return sig * env
