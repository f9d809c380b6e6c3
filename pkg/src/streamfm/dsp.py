"""Waveform <-> compressed complex spectrogram conversion.

Spectrograms are plain complex ``numpy`` arrays of shape ``(F, L)`` (or with
leading batch axes), ``F = fft_len // 2 + 1``. Frame ``l`` covers samples
``[l * hop, l * hop + window_len)`` and nothing later, so analysis never looks
ahead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import (
    ConfigError,
    CorruptFileError,
    DataError,
    InsufficientInputError,
    SilentInputError,
)

__all__ = [
    "AudioBuffer",
    "StftConfig",
    "CompressionParams",
    "DEFAULT_STFT",
    "DEFAULT_COMPRESSION",
    "stft",
    "istft",
    "compress",
    "decompress",
    "rms",
    "rms_normalize",
    "pack",
    "unpack",
    "read_wav",
    "write_wav",
    "save_spectrogram",
    "load_spectrogram",
]


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise DataError(f"expected mono audio, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("audio contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _window(name: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(analysis, synthesis) window pair for a window identifier."""
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)  # periodic
    if name == "sqrt_hann":
        # half-sample offset: square is a Hann window, no zero at either end
        w = np.sin(np.pi * (np.arange(n) + 0.5) / n)
        return w, w
    if name == "hann":
        return hann, np.ones(n)
    if name == "rect":
        return np.ones(n), np.ones(n)
    raise ConfigError(f"unknown window {name!r}")


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters.

    The declared algorithmic latency is one analysis window: a frame can only
    be synthesized once its last input sample has arrived and there is no
    look-ahead beyond that.
    """

    window_len: int = 320
    hop_len: int = 160
    fft_len: int = 320
    window: str = "sqrt_hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if not 0 < self.hop_len <= self.window_len <= self.fft_len:
            raise ConfigError(
                "need 0 < hop_len <= window_len <= fft_len, got "
                f"{self.hop_len}, {self.window_len}, {self.fft_len}"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        ana, syn = _window(self.window, self.window_len)
        # constant overlap-add of the analysis*synthesis product at this hop
        prod = ana * syn
        ola = np.zeros(self.hop_len)
        for start in range(0, self.window_len, self.hop_len):
            seg = prod[start:start + self.hop_len]
            ola[: len(seg)] += seg
        if ola.max() <= 0 or np.ptp(ola) > 1e-10 * ola.max():
            raise ConfigError(
                f"window {self.window!r} with window_len={self.window_len}, "
                f"hop_len={self.hop_len} does not satisfy constant overlap-add"
            )
        object.__setattr__(self, "_ola_gain", float(ola.mean()))

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def latency_s(self) -> float:
        return self.window_len / self.sample_rate

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_len

    @property
    def ola_gain(self) -> float:
        return self._ola_gain

    def windows(self) -> tuple[np.ndarray, np.ndarray]:
        return _window(self.window, self.window_len)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop_len + 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_len + self.window_len


DEFAULT_STFT = StftConfig()


@dataclass(frozen=True)
class CompressionParams:
    alpha: float = 0.5
    beta: float = 0.15

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


DEFAULT_COMPRESSION = CompressionParams()


def _samples(audio) -> np.ndarray:
    if isinstance(audio, AudioBuffer):
        return audio.samples
    return np.asarray(audio, dtype=float)


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed frames, shape ``(L, window_len)``."""
    n = cfg.n_frames(len(x))
    idx = np.arange(n)[:, None] * cfg.hop_len + np.arange(cfg.window_len)[None, :]
    return x[idx] * cfg.windows()[0]


def stft(audio, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Complex spectrogram of shape ``(fft_len // 2 + 1, L)``."""
    x = _samples(audio)
    if isinstance(audio, AudioBuffer) and audio.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"audio at {audio.sample_rate} Hz, STFT configured for {cfg.sample_rate} Hz"
        )
    if len(x) < cfg.window_len:
        raise InsufficientInputError(
            f"insufficient input: {len(x)} samples < window_len {cfg.window_len}"
        )
    frames = frame_signal(x, cfg)
    return np.fft.rfft(frames, n=cfg.fft_len, axis=-1).T


def synthesize_frames(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Inverse FFT plus synthesis window, shape ``(L, window_len)``.

    Already divided by the overlap-add gain, so summing the frames at hop
    offsets reconstructs the signal.
    """
    frames = np.fft.irfft(np.asarray(spec).T, n=cfg.fft_len, axis=-1)[:, : cfg.window_len]
    return frames * (cfg.windows()[1] / cfg.ola_gain)


def istft(spec: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> AudioBuffer:
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.n_bins:
        raise ConfigError(f"expected spectrogram with {cfg.n_bins} bins, got {spec.shape}")
    frames = synthesize_frames(spec, cfg)
    n_frames = frames.shape[0]
    out = np.zeros(cfg.output_length(n_frames)) if n_frames else np.zeros(0)
    for l in range(n_frames):
        out[l * cfg.hop_len : l * cfg.hop_len + cfg.window_len] += frames[l]
    return AudioBuffer(out, cfg.sample_rate)


def compress(spec: np.ndarray, params: CompressionParams = DEFAULT_COMPRESSION) -> np.ndarray:
    spec = np.asarray(spec)
    mag = np.abs(spec)
    return params.beta * mag ** params.alpha * np.exp(1j * np.angle(spec))


def decompress(spec: np.ndarray, params: CompressionParams = DEFAULT_COMPRESSION) -> np.ndarray:
    spec = np.asarray(spec)
    mag = (np.abs(spec) / params.beta) ** (1.0 / params.alpha)
    return mag * np.exp(1j * np.angle(spec))


def rms(x) -> float:
    x = _samples(x)
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


def rms_normalize(audio, target_dbfs: float = -25.0):
    """Scale to an RMS of ``10 ** (target_dbfs / 20)``; returns ``(audio, gain)``."""
    x = _samples(audio)
    level = rms(x)
    if level == 0.0:
        raise SilentInputError("silent input: cannot normalize an all-zero signal")
    gain = 10.0 ** (target_dbfs / 20.0) / level
    if isinstance(audio, AudioBuffer):
        return AudioBuffer(x * gain, audio.sample_rate), gain
    return x * gain, gain


def pack(spec: np.ndarray) -> np.ndarray:
    """Complex ``(..., F, L)`` -> real ``(..., 2F, L)``: real parts, then imaginary."""
    return np.concatenate([spec.real, spec.imag], axis=-2)


def unpack(x: np.ndarray) -> np.ndarray:
    f = x.shape[-2] // 2
    return x[..., :f, :] + 1j * x[..., f:, :]


def read_wav(path, sample_rate: int | None = None) -> AudioBuffer:
    """Read a mono 16-bit PCM or 32-bit float WAV file.

    No resampling: a rate different from ``sample_rate`` is an error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(float) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(float)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    if sample_rate is not None and rate != sample_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer, fmt: str = "float32") -> None:
    if fmt == "float32":
        data = audio.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.round(np.clip(audio.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise ConfigError(f"unknown WAV format {fmt!r}")
    wavfile.write(Path(path), audio.sample_rate, data)


# Spectrogram file: b"CSPC", uint32 F, uint32 L (little-endian), then F*L
# complex values as interleaved float32 (re, im), bin-major: all frames of
# bin 0 first.
_SPEC_MAGIC = b"CSPC"
_SPEC_HEADER = struct.Struct("<4sII")


def save_spectrogram(path, spec: np.ndarray) -> None:
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ConfigError("spectrogram must be 2-D (F, L)")
    payload = np.empty(spec.shape + (2,), dtype="<f4")
    payload[..., 0] = spec.real
    payload[..., 1] = spec.imag
    with open(path, "wb") as fh:
        fh.write(_SPEC_HEADER.pack(_SPEC_MAGIC, *spec.shape))
        fh.write(payload.tobytes())


def load_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SPEC_HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, f, l = _SPEC_HEADER.unpack_from(raw)
    if magic != _SPEC_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    expected = _SPEC_HEADER.size + f * l * 8
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SPEC_HEADER.size).reshape(f, l, 2)
    return data[..., 0].astype(float) + 1j * data[..., 1].astype(float)
