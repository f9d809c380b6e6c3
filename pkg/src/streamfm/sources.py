"""Built-in signal sources for hermetic training and evaluation.

``pseudo_speech`` synthesizes voiced syllables (pitch-modulated harmonic stacks
shaped by moving formants) separated by pauses, with occasional unvoiced
bursts. It is not speech, but it has the spectro-temporal structure that makes
denoising non-trivial: harmonics, a spectral envelope, onsets and silences.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .errors import ConfigError, DataError

__all__ = [
    "pseudo_speech",
    "colored_noise",
    "make_noise",
    "ColoredNoiseSource",
    "WavDirectorySource",
    "PseudoSpeechSource",
]

NOISE_COLORS = {"white": 0.0, "pink": 1.0, "brown": 2.0}


def _syllable_plan(n, sr, rng):
    """List of (start, stop, voiced) segments covering ``[0, n)`` with pauses."""
    segs = []
    pos = int(rng.uniform(0.0, 0.15) * sr)
    while pos < n:
        length = int(rng.uniform(0.08, 0.35) * sr)
        segs.append((pos, min(n, pos + length), rng.random() > 0.2))
        pos += length + int(rng.uniform(0.02, 0.25) * sr)
    return segs


def pseudo_speech(duration: float, sample_rate: int = 16000, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    base = rng.uniform(90.0, 240.0)
    f0 = base * (
        1.0
        + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
        + 0.04 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    )
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(7000 // (base * 1.15))
    k = np.arange(1, n_harm + 1)[:, None]

    out = np.zeros(n)
    for start, stop, voiced in _syllable_plan(n, sample_rate, rng):
        seg = slice(start, stop)
        m = stop - start
        if m < 16:
            continue
        env = np.sin(np.pi * np.linspace(0, 1, m)) ** 0.6 * rng.uniform(0.4, 1.0)
        if voiced:
            formants = np.array(
                [rng.uniform(300, 900), rng.uniform(900, 2400), rng.uniform(2300, 3500)]
            )
            bw = rng.uniform(60, 180, size=3)
            drift = np.linspace(1.0, rng.uniform(0.85, 1.15), m)
            hf = k * f0[seg][None, :]
            amp = np.zeros_like(hf)
            for fc, b, g in zip(formants, bw, (1.0, 0.6, 0.3)):
                amp += g * np.exp(-0.5 * ((hf - fc * drift) / (b + 0.05 * fc)) ** 2)
            amp = (amp + 0.02) / np.sqrt(k)
            amp[hf > 0.45 * sample_rate] = 0.0
            out[seg] = env * np.sum(amp * np.sin(k * phase[seg][None, :]), axis=0)
        else:
            lo = rng.uniform(2500, 4500)
            sos = signal.butter(4, [lo, min(lo + 3000, 0.45 * sample_rate)], "bandpass",
                                fs=sample_rate, output="sos")
            burst = signal.sosfilt(sos, rng.standard_normal(m))
            out[seg] = 0.3 * env * burst / (np.std(burst) + 1e-12)
    if not np.any(out):
        out[: min(n, 64)] = 1e-3
    return out / (np.max(np.abs(out)) + 1e-12) * 0.5


def colored_noise(n: int, color: str = "white", seed=0) -> np.ndarray:
    """Unit-RMS noise with power spectrum ~ 1/f**exponent."""
    if color not in NOISE_COLORS:
        raise ConfigError(f"unknown noise color {color!r}")
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=float)
    f[0] = 1.0
    spec = spec / f ** (NOISE_COLORS[color] / 2)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def make_noise(info: dict, n: int, sample_rate: int = 16000) -> np.ndarray:
    """Rebuild a noise draw from its recorded description."""
    if info["source"] == "colored":
        return colored_noise(n, info["color"], info["seed"])
    if info["source"] == "wav":
        data = dsp.read_wav(info["path"], sample_rate).samples
        if not len(data):
            raise DataError(f"{info['path']}: empty noise file")
        idx = (info["offset"] + np.arange(n)) % len(data)
        return data[idx]
    raise ConfigError(f"unknown noise source {info['source']!r}")


class ColoredNoiseSource:
    def __init__(self, colors=("white", "pink", "brown")):
        self.colors = tuple(colors)

    def describe(self, rng, n: int) -> dict:
        color = self.colors[int(rng.integers(len(self.colors)))]
        return {"source": "colored", "color": color, "seed": int(rng.integers(2**63))}


class WavDirectorySource:
    """Noise clips read from ``*.wav`` files; offsets wrap around."""

    def __init__(self, directory, sample_rate: int = 16000):
        self.files = sorted(str(p) for p in Path(directory).glob("*.wav"))
        if not self.files:
            raise DataError(f"no .wav files in {directory}")
        self.sample_rate = sample_rate
        self._lengths = {}

    def describe(self, rng, n: int) -> dict:
        path = self.files[int(rng.integers(len(self.files)))]
        if path not in self._lengths:
            self._lengths[path] = len(dsp.read_wav(path, self.sample_rate).samples)
        return {"source": "wav", "path": path, "offset": int(rng.integers(max(1, self._lengths[path])))}

    def draw(self, duration: float, rng) -> np.ndarray:
        """Random excerpt of a random file (looped when too short)."""
        info = self.describe(rng, 0)
        return make_noise(info, int(round(duration * self.sample_rate)), self.sample_rate)


class PseudoSpeechSource:
    """Random crops from a fixed, seeded pool of pseudo-speech utterances.

    Synthesizing every training clip from scratch dominates step time, so the
    pool is generated once (lazily) and cropped per draw. Different ``seed``
    values give disjoint pools, e.g. for held-out evaluation.
    """

    def __init__(self, seed=0, pool_size: int = 128, clip_seconds: float = 4.0,
                 sample_rate: int = 16000):
        self.seed = seed
        self.pool_size = pool_size
        self.clip_seconds = clip_seconds
        self.sample_rate = sample_rate
        self._pool = None

    @property
    def pool(self):
        if self._pool is None:
            self._pool = [
                pseudo_speech(self.clip_seconds, self.sample_rate, [self.seed, i])
                for i in range(self.pool_size)
            ]
        return self._pool

    def draw(self, duration: float, rng) -> np.ndarray:
        n = int(round(duration * self.sample_rate))
        clip = self.pool[int(rng.integers(self.pool_size))]
        if n >= len(clip):
            return np.resize(clip, n)
        start = int(rng.integers(len(clip) - n + 1))
        return clip[start : start + n].copy()
