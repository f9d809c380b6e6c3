"""Conditional flow matching on a Gaussian probability path.

Path: mean ``t * x1`` and standard deviation
``sigma_t = (1 - t) * sigma_max + t * sigma_min``. Conditional trajectories
``x_t = t * x1 + sigma_t * z`` are straight lines, so the target velocity is
constant along each one: ``u = x1 + (sigma_min - sigma_max) * z``.

Complex arrays are treated as pairs of independent real coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsp
from .errors import ConfigError, NumericError
from .nn.tensor import Tensor
from .nn import ops

__all__ = [
    "FlowPathParams",
    "SamplerConfig",
    "DEFAULT_FLOW",
    "path_moments",
    "sample_xt",
    "target_field",
    "target_field_as_printed",
    "cfm_loss",
    "integrate_ode",
    "frame_noise",
    "base_noise",
    "enhance_samples",
    "restore",
    "output_coefficients",
    "input_scale",
]


@dataclass(frozen=True)
class FlowPathParams:
    sigma_min: float = 1e-4
    sigma_max: float = 1.0

    def __post_init__(self):
        if not (self.sigma_max > self.sigma_min >= 0):
            raise ConfigError(
                f"need sigma_max > sigma_min >= 0, got {self.sigma_max}, {self.sigma_min}"
            )

    def sigma(self, t):
        return (1.0 - t) * self.sigma_max + t * self.sigma_min


DEFAULT_FLOW = FlowPathParams()


@dataclass(frozen=True)
class SamplerConfig:
    """``nfe`` counts velocity evaluations; midpoint uses two per step."""

    nfe: int = 5
    scheme: str = "euler"

    def __post_init__(self):
        if int(self.nfe) != self.nfe or self.nfe < 1:
            raise ConfigError(f"nfe must be a positive integer, got {self.nfe}")
        if self.scheme not in ("euler", "midpoint"):
            raise ConfigError(f"unknown sampler scheme {self.scheme!r}")
        if self.scheme == "midpoint" and self.nfe % 2:
            raise ConfigError(f"midpoint needs an even nfe, got {self.nfe}")

    @property
    def steps(self) -> int:
        return self.nfe if self.scheme == "euler" else self.nfe // 2

    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError(f"flow time must lie in [0, 1], got {t}")
    return t


def _bcast_t(t, x):
    """Reshape per-item times ``(B,)`` so they broadcast against ``x``."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (np.ndim(x) - t.ndim))


def path_moments(t, x1, p: FlowPathParams = DEFAULT_FLOW):
    """Mean and standard deviation of the conditional path at time ``t``."""
    t = _bcast_t(_check_t(t), x1)
    return t * np.asarray(x1), p.sigma(t)


def sample_xt(x1, t, z, p: FlowPathParams = DEFAULT_FLOW):
    x1 = np.asarray(x1)
    z = np.asarray(z)
    if x1.shape != z.shape:
        raise ConfigError(f"shape mismatch: x1 {x1.shape} vs z {z.shape}")
    mu, sigma = path_moments(t, x1, p)
    return mu + sigma * z


def target_field(x_t, x1, t, p: FlowPathParams = DEFAULT_FLOW):
    """Velocity of the conditional flow through ``x_t`` at time ``t``.

    ``u(x) = x1 + (sigma_min - sigma_max) / sigma_t * (x - t * x1)``; on the
    path this is ``d/dt (t * x1 + sigma_t * z)``.
    """
    x_t = np.asarray(x_t)
    x1 = np.asarray(x1)
    t = _bcast_t(_check_t(t), x1)
    sigma = p.sigma(t)
    if np.any(sigma <= 0):
        raise ConfigError("singular time: sigma_t = 0 (t = 1 with sigma_min = 0)")
    return x1 + (p.sigma_min - p.sigma_max) / sigma * (x_t - t * x1)


def output_coefficients(t, p: FlowPathParams = DEFAULT_FLOW, sigma_data: float = 0.05):
    """``(a, b)`` such that a backbone returns ``v = a * x_t + b * F``.

    The field is written through a clean-signal estimate
    ``D = c_skip * x_t + c_out * F`` substituted into the target field:
    ``v = c1 * x_t + (1 - t * c1) * D`` with ``c1 = (sigma_min - sigma_max) /
    sigma_t``. ``c_skip`` and ``c_out`` are the Wiener-style scalings for a
    signal of per-component scale ``sigma_data`` seen through
    ``x_t = t * x1 + sigma_t * z``, which make the regression target of ``F``
    unit-variance at every ``t``. An untrained ``F = 0`` already yields the
    field of the data-free Gaussian.
    """
    t = np.asarray(t, dtype=float)
    st = p.sigma(t)
    s2 = sigma_data * sigma_data
    den = t * t * s2 + st * st
    c1 = (p.sigma_min - p.sigma_max) / st
    c2 = 1.0 - t * c1
    c_skip = t * s2 / den
    c_out = st * sigma_data / np.sqrt(den)
    return c1 + c2 * c_skip, c2 * c_out


def input_scale(t, p: FlowPathParams = DEFAULT_FLOW, sigma_data: float = 0.05):
    """``1 / std(x_t)`` for a signal of per-component scale ``sigma_data``."""
    t = np.asarray(t, dtype=float)
    st = p.sigma(t)
    return 1.0 / np.sqrt(t * t * sigma_data * sigma_data + st * st)


def target_field_as_printed(x_t, x1, t, p: FlowPathParams = DEFAULT_FLOW):
    """``(sigma_max * x_t - sigma_min * (x_t - x1)) / sigma_t``.

    Kept for comparison only: it is not the derivative of the path's flow map
    (see README, "Target field").
    """
    t = _bcast_t(_check_t(t), x1)
    return (p.sigma_max * x_t - p.sigma_min * (x_t - x1)) / p.sigma(t)


def cfm_loss(v_pred, u_target):
    """Mean squared error over all real coordinates.

    Accepts numpy arrays (real or complex; returns a float) or autodiff
    tensors holding packed real coordinates (returns a scalar tensor).
    """
    if isinstance(v_pred, Tensor) or isinstance(u_target, Tensor):
        return ops.mse(v_pred, u_target)
    v_pred = np.asarray(v_pred)
    u_target = np.asarray(u_target)
    if v_pred.shape != u_target.shape:
        raise ConfigError(f"shape mismatch: {v_pred.shape} vs {u_target.shape}")
    d = v_pred - u_target
    if np.iscomplexobj(d):
        return float(np.mean(d.real ** 2 + d.imag ** 2) / 2.0)
    return float(np.mean(d * d))


VelocityFieldFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def integrate_ode(v: VelocityFieldFn, x0, cond, cfg: SamplerConfig):
    """Explicit integration of ``dx/dt = v(x, cond, t)`` from 0 to 1.

    Uses a uniform grid and calls ``v`` exactly ``cfg.nfe`` times.
    """
    x = np.asarray(x0)
    grid = cfg.time_grid()
    for k in range(cfg.steps):
        t, h = grid[k], grid[k + 1] - grid[k]
        if cfg.scheme == "euler":
            x = x + h * v(x, cond, t)
        else:
            x_mid = x + (h / 2) * v(x, cond, t)
            x = x + h * v(x_mid, cond, t + h / 2)
    return x


def frame_noise(seed: int, frame: int, n_bins: int) -> np.ndarray:
    """Standard complex-normal base draw for one frame.

    Depends only on ``(seed, frame)``, so streaming and offline processing
    see identical noise regardless of chunking.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame)])
    pair = rng.standard_normal((2, n_bins))
    return pair[0] + 1j * pair[1]


def base_noise(seed: int, n_bins: int, n_frames: int) -> np.ndarray:
    if n_frames == 0:
        return np.zeros((n_bins, 0), dtype=complex)
    return np.stack([frame_noise(seed, l, n_bins) for l in range(n_frames)], axis=1)


def padded_length(n: int, cfg: dsp.StftConfig) -> int:
    """Smallest length >= n made of whole frames (at least one)."""
    if n <= cfg.window_len:
        return cfg.window_len
    extra = -(n - cfg.window_len) % cfg.hop_len
    return n + extra


def enhance_samples(
    samples: np.ndarray,
    model,
    cfg: SamplerConfig,
    seed: int,
    flow: FlowPathParams = DEFAULT_FLOW,
    stft_cfg: dsp.StftConfig = dsp.DEFAULT_STFT,
    compression: dsp.CompressionParams = dsp.DEFAULT_COMPRESSION,
    on_eval: Callable[[float], None] | None = None,
) -> np.ndarray:
    """Offline causal processing without level normalization.

    The input is zero-padded at the end to whole frames; the output is cropped
    back to the input length. This is the reference the streaming engine is
    checked against.
    """
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    padded = np.zeros(padded_length(n, stft_cfg))
    padded[:n] = samples
    cond = dsp.compress(dsp.stft(padded, stft_cfg), compression)
    x0 = flow.sigma_max * base_noise(seed, cond.shape[0], cond.shape[1])

    def field(x, c, t):
        if on_eval is not None:
            on_eval(t)
        out = model.velocity(x, c, t)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite velocity at t={t}")
        return out

    x1 = integrate_ode(field, x0, cond, cfg)
    out = dsp.istft(dsp.decompress(x1, compression), stft_cfg).samples
    return out[:n]


def restore(
    noisy,
    model,
    cfg: SamplerConfig,
    seed: int,
    flow: FlowPathParams = DEFAULT_FLOW,
    stft_cfg: dsp.StftConfig = dsp.DEFAULT_STFT,
    compression: dsp.CompressionParams = dsp.DEFAULT_COMPRESSION,
    target_dbfs: float = -25.0,
    on_eval: Callable[[float], None] | None = None,
) -> dsp.AudioBuffer:
    """Level-normalize, then run :func:`enhance_samples`."""
    if not isinstance(noisy, dsp.AudioBuffer):
        noisy = dsp.AudioBuffer(noisy, stft_cfg.sample_rate)
    if noisy.sample_rate != stft_cfg.sample_rate:
        raise ConfigError(
            f"input at {noisy.sample_rate} Hz, model expects {stft_cfg.sample_rate} Hz"
        )
    normed, _ = dsp.rms_normalize(noisy, target_dbfs)
    out = enhance_samples(
        normed.samples, model, cfg, seed, flow, stft_cfg, compression, on_eval
    )
    return dsp.AudioBuffer(out, noisy.sample_rate)
