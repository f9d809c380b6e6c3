"""Seeded degradation operators and their ordered composition.

A chain applies its operators in list order. Parameters may be fixed values
or ``[low, high]`` ranges; ranges are drawn from the chain's seed when the
chain is composed, and every drawn value (including per-operator seeds and
the noise draw) is written to the provenance record. Feeding a provenance
record back through :func:`compose_chain` reproduces the output bit-exactly.

Chain and provenance files are YAML::

    seed: 7
    chain:
      - kind: additive_noise
        params: {snr_db: [0, 20]}
      - kind: bandlimit
        params: {cutoff_hz: 4000, order: 8, type: lowpass}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import signal

from . import dsp, sources
from .config import load_config
from .errors import ConfigError, SilentInputError

__all__ = [
    "KINDS",
    "DEFAULT_RANGES",
    "DegradationSpec",
    "DegradationChain",
    "apply_noise",
    "apply_reverb",
    "synthetic_rir",
    "apply_bandlimit",
    "apply_clip",
    "apply_codec_proxy",
    "sample_tf_patches",
    "apply_tf_mask",
    "apply_level",
    "compose_chain",
    "sample_chain",
    "load_chain",
    "save_chain",
]

KINDS = ("additive_noise", "reverb", "bandlimit", "clip", "codec_proxy", "tf_mask", "level_shift")

# Ranges used by the random chain sampler.
DEFAULT_RANGES = {
    "additive_noise": {"snr_db": [-5.0, 30.0]},
    "reverb": {"t60": [0.1, 0.9], "drr_db": [0.0, 12.0]},
    "bandlimit": {"cutoff_hz": [1000.0, 7500.0], "order": [2, 8], "type": "lowpass"},
    "clip": {"threshold": [0.02, 0.2], "hardness": "hard"},
    "codec_proxy": {"bit_depth": [4, 10], "decimation": [1, 2]},
    "tf_mask": {"patch_count": [1, 6], "max_f": 40, "max_l": 8, "full_band": False},
    "level_shift": {"gain_db": [-20.0, 6.0]},
}

_INT_PARAMS = {"order", "bit_depth", "decimation", "patch_count", "max_f", "max_l"}


def _split(audio):
    if isinstance(audio, dsp.AudioBuffer):
        return audio.samples, audio.sample_rate, lambda y: dsp.AudioBuffer(y, audio.sample_rate)
    return np.asarray(audio, dtype=float), None, lambda y: y


def _power(x):
    return float(np.mean(x * x))


def apply_noise(clean, noise, snr_db: float):
    """Add ``noise`` scaled so clean power / noise power equals ``snr_db``.

    Noise longer than the clean signal is cropped; shorter noise is looped.
    ``snr_db = inf`` returns the clean signal unchanged.
    """
    x, _, wrap = _split(clean)
    nz, _, _ = _split(noise)
    if np.isinf(snr_db) and snr_db > 0:
        return wrap(x.copy())
    nz = np.resize(nz, len(x)) if len(nz) < len(x) else nz[: len(x)]
    pn = _power(nz)
    if pn == 0.0:
        raise SilentInputError("silent noise: cannot reach a finite SNR")
    gain = np.sqrt(_power(x) / (pn * 10.0 ** (snr_db / 10.0)))
    return wrap(x + gain * nz)


def noise_gain(clean, noise, snr_db: float) -> float:
    x, _, _ = _split(clean)
    nz, _, _ = _split(noise)
    nz = np.resize(nz, len(x)) if len(nz) < len(x) else nz[: len(x)]
    return float(np.sqrt(_power(x) / (_power(nz) * 10.0 ** (snr_db / 10.0))))


def synthetic_rir(t60: float, seed, sample_rate: int = 16000, drr_db: float = 0.0) -> np.ndarray:
    """Unit direct tap followed by exponentially decaying white noise.

    The envelope ``exp(-6.908 t / t60)`` is 60 dB down at ``t = t60``; the
    tail is scaled so direct energy / tail energy equals ``drr_db``.
    """
    if t60 <= 0:
        raise ConfigError("t60 must be positive")
    n = int(np.ceil(t60 * sample_rate))
    rir = np.zeros(max(n, 1))
    rir[0] = 1.0
    if n > 1:
        t = np.arange(1, n) / sample_rate
        tail = np.random.default_rng(seed).standard_normal(n - 1) * np.exp(-6.908 * t / t60)
        tail *= np.sqrt(10.0 ** (-drr_db / 10.0) / np.sum(tail * tail))
        rir[1:] = tail
    return rir


def apply_reverb(clean, t60: float, seed=0, sample_rate: int = 16000, drr_db: float = 0.0):
    x, sr, wrap = _split(clean)
    rir = synthetic_rir(t60, seed, sr or sample_rate, drr_db)
    if len(rir) == 1:
        return wrap(x.copy())
    return wrap(signal.fftconvolve(x, rir)[: len(x)])


def bandlimit_sos(cutoff_hz, order: int, kind: str, sample_rate: int) -> np.ndarray:
    nyq = sample_rate / 2
    cut = np.atleast_1d(np.asarray(cutoff_hz, dtype=float))
    if np.any(cut <= 0) or np.any(cut >= nyq):
        raise ConfigError(f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyq} Hz)")
    if kind not in ("lowpass", "highpass", "bandpass"):
        raise ConfigError(f"unknown filter type {kind!r}")
    if (kind == "bandpass") != (cut.size == 2):
        raise ConfigError("bandpass needs [low, high] cutoffs; lowpass/highpass need one")
    wn = cut if kind == "bandpass" else cut[0]
    return signal.butter(int(order), wn, btype=kind, fs=sample_rate, output="sos")


def apply_bandlimit(clean, cutoff_hz, order: int = 8, type: str = "lowpass", sample_rate: int = 16000):
    """Butterworth filter realized as cascaded biquad sections."""
    x, sr, wrap = _split(clean)
    sos = bandlimit_sos(cutoff_hz, order, type, sr or sample_rate)
    return wrap(signal.sosfilt(sos, x))


def apply_clip(clean, threshold: float, hardness: str = "hard"):
    if threshold <= 0:
        raise ConfigError("clip threshold must be positive")
    x, _, wrap = _split(clean)
    if hardness == "hard":
        return wrap(np.clip(x, -threshold, threshold))
    if hardness == "soft":
        return wrap(threshold * np.tanh(x / threshold))
    raise ConfigError(f"unknown clip hardness {hardness!r}")


_MU = 255.0


def apply_codec_proxy(clean, bit_depth: int = 8, decimation: int = 1):
    """Stand-in for a lossy codec: mu-law quantization, then decimate-and-hold.

    Not a real GSM/MP3 codec.
    """
    if not 4 <= int(bit_depth) <= 16 or int(bit_depth) != bit_depth:
        raise ConfigError(f"bit_depth must be an integer in [4, 16], got {bit_depth}")
    if decimation not in (1, 2, 4):
        raise ConfigError(f"decimation must be 1, 2 or 4, got {decimation}")
    x, _, wrap = _split(clean)
    x = np.clip(x, -1.0, 1.0)
    levels = 2 ** (int(bit_depth) - 1) - 1
    y = np.sign(x) * np.log1p(_MU * np.abs(x)) / np.log1p(_MU)
    q = np.round(y * levels) / levels
    out = np.sign(q) * np.expm1(np.abs(q) * np.log1p(_MU)) / _MU
    if decimation > 1:
        out = np.repeat(out[::decimation], decimation)[: len(x)]
    return wrap(out)


def sample_tf_patches(shape, patch_count: int, max_f: int, max_l: int, seed, full_band=False):
    """Rectangles ``(f0, l0, n_f, n_l)`` inside a ``(F, L)`` grid."""
    F, L = shape
    if max_f > F or max_l > L:
        raise ConfigError(f"patch size ({max_f}, {max_l}) exceeds spectrogram {shape}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(int(patch_count)):
        nf = F if full_band else int(rng.integers(1, max_f + 1))
        nl = int(rng.integers(1, max_l + 1))
        f0 = 0 if full_band else int(rng.integers(0, F - nf + 1))
        l0 = int(rng.integers(0, L - nl + 1))
        patches.append((f0, l0, nf, nl))
    return patches


def apply_tf_mask(spec, patch_count: int, max_f: int, max_l: int, seed=0, full_band=False):
    """Zero ``patch_count`` random axis-aligned time-frequency rectangles."""
    spec = np.asarray(spec)
    out = spec.copy()
    for f0, l0, nf, nl in sample_tf_patches(spec.shape, patch_count, max_f, max_l, seed, full_band):
        out[f0 : f0 + nf, l0 : l0 + nl] = 0
    return out


def _tf_mask_audio(x, stft_cfg, **params):
    # pad so every input sample is fully overlapped, then crop back
    pad = stft_cfg.window_len - stft_cfg.hop_len
    n = len(x)
    total = n + 2 * pad
    if total < stft_cfg.window_len:
        extra = stft_cfg.window_len - total
    else:
        extra = -(total - stft_cfg.window_len) % stft_cfg.hop_len
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + extra)])
    spec = apply_tf_mask(dsp.stft(xp, stft_cfg), **params)
    return dsp.istft(spec, stft_cfg).samples[pad : pad + n]


def apply_level(clean, gain_db: float):
    x, _, wrap = _split(clean)
    return wrap(x * 10.0 ** (gain_db / 20.0))


@dataclass
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; choose from {KINDS}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": copy.deepcopy(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["kind"], dict(d.get("params") or {}))


@dataclass
class DegradationChain:
    specs: list = field(default_factory=list)
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": int(self.rng_seed), "chain": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationChain":
        return cls([DegradationSpec.from_dict(s) for s in d.get("chain") or []], int(d.get("seed", 0)))

    @classmethod
    def from_provenance(cls, provenance: list) -> "DegradationChain":
        return cls([DegradationSpec.from_dict(p) for p in provenance], 0)


def save_chain(path, chain_or_provenance) -> None:
    if isinstance(chain_or_provenance, DegradationChain):
        data = chain_or_provenance.to_dict()
    else:
        data = {"provenance": chain_or_provenance}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def load_chain(path) -> DegradationChain:
    """Read a chain file or a provenance file (replayed as a fixed chain)."""
    data = load_config(path)
    if "provenance" in data:
        return DegradationChain.from_provenance(data["provenance"])
    return DegradationChain.from_dict(data)


def _draw(value, name, rng):
    if isinstance(value, (list, tuple)) and len(value) == 2:
        lo, hi = value
        if name in _INT_PARAMS:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(lo, hi))
    return copy.deepcopy(value)


def _realize(spec: DegradationSpec, rng, n: int, noise_source) -> dict:
    """Concrete parameters for one operator; draws nothing already fixed."""
    p = {}
    for k, v in spec.params.items():
        if k == "cutoff_hz" and spec.params.get("type") == "bandpass":
            # [low, high], each a number or a [lo, hi] range
            p[k] = [float(_draw(c, k, rng)) for c in v]
        else:
            p[k] = _draw(v, k, rng)
    if spec.kind in ("reverb", "tf_mask") and "seed" not in p:
        p["seed"] = int(rng.integers(2**63))
    if spec.kind == "additive_noise" and "noise" not in p:
        if noise_source is None:
            noise_source = sources.ColoredNoiseSource()
        p["noise"] = noise_source.describe(rng, n)
    return p


def _apply(kind: str, x: np.ndarray, p: dict, sample_rate: int, stft_cfg) -> np.ndarray:
    if kind == "additive_noise":
        noise = sources.make_noise(p["noise"], len(x), sample_rate)
        return apply_noise(x, noise, p["snr_db"])
    if kind == "reverb":
        return apply_reverb(x, p["t60"], p["seed"], sample_rate, p.get("drr_db", 0.0))
    if kind == "bandlimit":
        return apply_bandlimit(x, p["cutoff_hz"], p.get("order", 8), p.get("type", "lowpass"), sample_rate)
    if kind == "clip":
        return apply_clip(x, p["threshold"], p.get("hardness", "hard"))
    if kind == "codec_proxy":
        return apply_codec_proxy(x, p.get("bit_depth", 8), p.get("decimation", 1))
    if kind == "tf_mask":
        if p["patch_count"] == 0:
            return x.copy()
        return _tf_mask_audio(
            x, stft_cfg, patch_count=p["patch_count"], max_f=p["max_f"], max_l=p["max_l"],
            seed=p["seed"], full_band=p.get("full_band", False),
        )
    if kind == "level_shift":
        return apply_level(x, p["gain_db"])
    raise ConfigError(f"unknown degradation kind {kind!r}")


def compose_chain(clean, chain: DegradationChain, noise_source=None, stft_cfg=dsp.DEFAULT_STFT):
    """Apply ``chain`` in order. Returns ``(noisy, provenance)``."""
    x, sr, wrap = _split(clean)
    sr = sr or stft_cfg.sample_rate
    provenance = []
    for i, spec in enumerate(chain.specs):
        rng = np.random.default_rng([int(chain.rng_seed) & 0xFFFFFFFFFFFFFFFF, i])
        params = _realize(spec, rng, len(x), noise_source)
        x = _apply(spec.kind, x, params, sr, stft_cfg)
        provenance.append({"kind": spec.kind, "params": params})
    return wrap(x), provenance


def sample_chain(rng, kinds=KINDS, max_ops: int = 4, ranges=None) -> DegradationChain:
    """Random chain of 1..max_ops distinct kinds in random order, with ranged params."""
    ranges = ranges or DEFAULT_RANGES
    kinds = list(kinds)
    k = int(rng.integers(1, min(max_ops, len(kinds)) + 1))
    picked = [kinds[i] for i in rng.permutation(len(kinds))[:k]]
    specs = [DegradationSpec(kind, copy.deepcopy(ranges[kind])) for kind in picked]
    return DegradationChain(specs, int(rng.integers(2**63)))
