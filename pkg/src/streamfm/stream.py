"""Frame-synchronous streaming enhancement.

Each completed analysis frame runs the whole reverse ODE before synthesis.
Every evaluation point of the sampler owns a causal network cache (conv
histories and cumulative-norm statistics), so a frame advances each cache by
exactly one step and the result equals offline causal processing of the same
signal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dsp, flow
from .errors import ConfigError, NumericError, StreamClosedError

__all__ = ["StreamState", "LatencyReport", "open_stream", "push_samples", "flush", "measure_latency"]


class StreamState:
    """Per-stream buffers and caches. Not thread-safe; one caller at a time."""

    def __init__(self, model, sampler_cfg, stft_cfg, seed, flow_params, compression):
        self.model = model
        self.sampler_cfg = sampler_cfg
        self.stft_cfg = stft_cfg
        self.seed = int(seed)
        self.flow_params = flow_params
        self.compression = compression
        n_caches = sampler_cfg.steps * (1 if sampler_cfg.scheme == "euler" else 2)
        self.caches = [dict() for _ in range(n_caches)]
        self.inbuf = np.zeros(0)
        self.ola = np.zeros(stft_cfg.window_len)
        self.frame = 0
        self.samples_in = 0
        self.samples_out = 0
        self.closed = False
        self.compute_s = 0.0
        self.field_evals = 0

    @property
    def n_caches(self) -> int:
        return len(self.caches)

    def _field(self, k):
        cache = self.caches[k]

        def v(x, c, t):
            self.field_evals += 1
            out = self.model.velocity(x[:, None], c[:, None], t, cache)[:, 0]
            if not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite velocity at frame {self.frame}, t={t}")
            return out

        return v

    def _integrate(self, x0, cond):
        """Same arithmetic as :func:`flow.integrate_ode`, one cache per evaluation."""
        cfg = self.sampler_cfg
        grid = cfg.time_grid()
        x = x0
        for k in range(cfg.steps):
            t, h = grid[k], grid[k + 1] - grid[k]
            if cfg.scheme == "euler":
                x = x + h * self._field(k)(x, cond, t)
            else:
                x_mid = x + (h / 2) * self._field(2 * k)(x, cond, t)
                x = x + h * self._field(2 * k + 1)(x_mid, cond, t + h / 2)
        return x

    def _process_frame(self, window_samples: np.ndarray) -> np.ndarray:
        cfg = self.stft_cfg
        t0 = time.perf_counter()
        ana, _ = cfg.windows()
        spec = np.fft.rfft(window_samples * ana, n=cfg.fft_len)
        cond = dsp.compress(spec, self.compression)
        x0 = self.flow_params.sigma_max * flow.frame_noise(self.seed, self.frame, cfg.n_bins)
        x1 = self._integrate(x0, cond)
        frame = dsp.synthesize_frames(dsp.decompress(x1, self.compression)[:, None], cfg)[0]
        self.ola += frame
        out = self.ola[: cfg.hop_len].copy()
        self.ola = np.concatenate([self.ola[cfg.hop_len :], np.zeros(cfg.hop_len)])
        self.frame += 1
        self.compute_s += time.perf_counter() - t0
        return out


def open_stream(model, sampler_cfg: flow.SamplerConfig = flow.SamplerConfig(),
                stft_cfg: dsp.StftConfig = dsp.DEFAULT_STFT, seed: int = 0,
                flow_params: flow.FlowPathParams = flow.DEFAULT_FLOW,
                compression: dsp.CompressionParams = dsp.DEFAULT_COMPRESSION) -> StreamState:
    if not getattr(model, "causal", False):
        raise ConfigError("streaming requires a causal model")
    n_bins = getattr(getattr(model, "cfg", None), "n_bins", stft_cfg.n_bins)
    if n_bins != stft_cfg.n_bins:
        raise ConfigError(f"model expects {n_bins} bins, STFT gives {stft_cfg.n_bins}")
    return StreamState(model, sampler_cfg, stft_cfg, seed, flow_params, compression)


def push_samples(state: StreamState, samples) -> np.ndarray:
    """Feed samples; return the enhanced samples that became final.

    Output is emitted ``hop_len`` samples per completed frame, so the first
    output appears once ``window_len`` samples have arrived.
    """
    if state.closed:
        raise StreamClosedError("push on a closed stream")
    samples = np.asarray(samples, dtype=float).reshape(-1)
    state.samples_in += len(samples)
    state.inbuf = np.concatenate([state.inbuf, samples])
    cfg = state.stft_cfg
    out = []
    while len(state.inbuf) >= cfg.window_len:
        out.append(state._process_frame(state.inbuf[: cfg.window_len]))
        state.inbuf = state.inbuf[cfg.hop_len :]
    out = np.concatenate(out) if out else np.zeros(0)
    state.samples_out += len(out)
    return out


def flush(state: StreamState) -> np.ndarray:
    """Zero-pad any partial frame, emit the overlap-add tail, close the stream.

    The total number of emitted samples equals the number pushed.
    """
    if state.closed:
        raise StreamClosedError("stream already flushed")
    cfg = state.stft_cfg
    pieces = []
    if state.samples_in > 0:
        pending = len(state.inbuf) - (cfg.window_len - cfg.hop_len) if state.frame else len(state.inbuf)
        if pending > 0:
            pad = np.zeros(cfg.window_len - len(state.inbuf))
            pieces.append(state._process_frame(np.concatenate([state.inbuf, pad])))
        pieces.append(state.ola[: cfg.window_len - cfg.hop_len].copy())
    state.closed = True
    tail = np.concatenate(pieces) if pieces else np.zeros(0)
    tail = tail[: state.samples_in - state.samples_out]
    state.samples_out += len(tail)
    return tail


@dataclass(frozen=True)
class LatencyReport:
    algorithmic_latency_ms: float
    window_ms: float
    hop_ms: float
    compute_per_frame_ms: float
    real_time_factor: float
    nfe: int
    frames: int

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.__dict__.items())


def algorithmic_latency_ms(stft_cfg: dsp.StftConfig) -> float:
    return stft_cfg.window_len * 1000.0 / stft_cfg.sample_rate


def measure_latency(stft_cfg: dsp.StftConfig = dsp.DEFAULT_STFT, model=None,
                    sampler_cfg: flow.SamplerConfig = flow.SamplerConfig(),
                    duration_s: float = 10.0, seed: int = 0) -> LatencyReport:
    """Analytic latency plus measured per-frame compute.

    Without a model only the analytic fields are filled (compute and RTF are
    0). The benchmark streams ``duration_s`` of white noise in hop-sized pushes.
    """
    hop_ms = stft_cfg.hop_len * 1000.0 / stft_cfg.sample_rate
    per_frame, frames = 0.0, 0
    if model is not None:
        state = open_stream(model, sampler_cfg, stft_cfg, seed)
        x = 0.05 * np.random.default_rng(seed).standard_normal(int(duration_s * stft_cfg.sample_rate))
        for start in range(0, len(x), stft_cfg.hop_len):
            push_samples(state, x[start : start + stft_cfg.hop_len])
        frames = state.frame
        per_frame = state.compute_s * 1000.0 / max(frames, 1)
    return LatencyReport(
        algorithmic_latency_ms=algorithmic_latency_ms(stft_cfg),
        window_ms=algorithmic_latency_ms(stft_cfg),
        hop_ms=hop_ms,
        compute_per_frame_ms=per_frame,
        real_time_factor=per_frame / hop_ms,
        nfe=sampler_cfg.nfe,
        frames=frames,
    )
