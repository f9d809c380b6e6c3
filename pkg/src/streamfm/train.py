"""Desk-scale OT-CFM training.

Every random draw in a step (speech crop, degradation chain, flow time, base
noise) comes from a generator seeded by ``(seed, step, item)``, so a run is a
pure function of its config and resuming from a checkpoint continues the
exact same trajectory.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import degrade, dsp, flow, sources
from .backbones import build_model, config_from_dict, config_to_dict
from .errors import ConfigError, NumericError, SilentInputError
from .nn.checkpoint import read_checkpoint, write_checkpoint
from .nn.tensor import Tape

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimState",
    "sample_training_pair",
    "make_batch",
    "train_step",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    sigma_min: float = 1e-4
    sigma_max: float = 1.0
    segment_s: float = 2.0
    seed: int = 0
    checkpoint_interval: int = 0
    preset: str = "convglu-toy"
    model: dict | None = None  # explicit model config; overrides preset
    degradations: tuple = degrade.KINDS
    max_degradations: int = 4
    snr_db: tuple = (-5.0, 30.0)
    target_dbfs: float = -25.0
    speech_pool_seed: int = 0
    speech_pool_size: int = 128
    speech_dir: str | None = None
    noise_dir: str | None = None
    alpha: float = 0.5
    beta: float = 0.15

    def __post_init__(self):
        for name in ("betas", "degradations", "snr_db"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("steps, batch_size and learning_rate must be non-negative (batch >= 1)")
        if self.segment_s * 16000 < dsp.DEFAULT_STFT.window_len:
            raise ConfigError("segment shorter than one STFT window")
        unknown = set(self.degradations) - set(degrade.KINDS)
        if unknown:
            raise ConfigError(f"unknown degradation kinds: {sorted(unknown)}")

    @property
    def flow(self) -> flow.FlowPathParams:
        return flow.FlowPathParams(self.sigma_min, self.sigma_max)

    @property
    def compression(self) -> dsp.CompressionParams:
        return dsp.CompressionParams(self.alpha, self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model) -> "OptimState":
        return cls(
            {n: np.zeros_like(p.data) for n, p in model.named_parameters()},
            {n: np.zeros_like(p.data) for n, p in model.named_parameters()},
            0,
        )


def adam_step(named_params, optim: OptimState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update of ``(name, Parameter)`` pairs using ``.grad``."""
    b1, b2 = betas
    optim.step += 1
    c1 = 1.0 - b1 ** optim.step
    c2 = 1.0 - b2 ** optim.step
    for name, p in named_params:
        g = p.grad
        m = optim.m.setdefault(name, np.zeros_like(p.data))
        v = optim.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


_FLOW_STREAM = 0xFFFFFFFF  # item slot reserved for the flow-time / base-noise draws


def _item_rng(seed, step, item):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), int(item)])


def sample_training_pair(speech_source, chain_sampler, seed, cfg: TrainConfig = TrainConfig(),
                         noise_source=None):
    """One on-the-fly (clean, degraded) pair as compressed spectrograms.

    Both signals are brought to ``cfg.target_dbfs`` before analysis. Returns
    ``(x1, cond, provenance)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(16):
        clean = speech_source.draw(cfg.segment_s, rng)
        if dsp.rms(clean) > 0:
            break
    else:
        raise SilentInputError("speech source produced only silent clips")
    clean, _ = dsp.rms_normalize(clean, cfg.target_dbfs)
    chain = chain_sampler(rng)
    noisy, provenance = degrade.compose_chain(clean, chain, noise_source)
    if dsp.rms(noisy) > 0:
        noisy, _ = dsp.rms_normalize(noisy, cfg.target_dbfs)
    x1 = dsp.compress(dsp.stft(clean), cfg.compression)
    cond = dsp.compress(dsp.stft(noisy), cfg.compression)
    return x1, cond, provenance


class _Data:
    """Speech/noise sources and chain sampler built from a config."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        if cfg.speech_dir:
            self.speech = sources.WavDirectorySource(cfg.speech_dir)
        else:
            self.speech = sources.PseudoSpeechSource(cfg.speech_pool_seed, cfg.speech_pool_size)
        self.noise = sources.WavDirectorySource(cfg.noise_dir) if cfg.noise_dir else sources.ColoredNoiseSource()
        self.ranges = copy.deepcopy(degrade.DEFAULT_RANGES)
        self.ranges["additive_noise"]["snr_db"] = list(cfg.snr_db)

    def chain(self, rng):
        if not self.cfg.degradations:
            return degrade.DegradationChain([], 0)
        return degrade.sample_chain(rng, self.cfg.degradations, self.cfg.max_degradations, self.ranges)

    def pair(self, rng):
        return sample_training_pair(self.speech, self.chain, rng, self.cfg, self.noise)


def make_batch(data: _Data, step: int):
    x1s, conds = [], []
    for i in range(data.cfg.batch_size):
        x1, cond, _ = data.pair(_item_rng(data.cfg.seed, step, i))
        x1s.append(x1)
        conds.append(cond)
    return np.stack(x1s), np.stack(conds)


def train_step(model, batch, flow_params: flow.FlowPathParams, optim: OptimState, rng,
               lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    """One OT-CFM step on ``batch = (x1, cond)``; returns ``(loss, grad_norm)``.

    The loss is evaluated before the parameter update.
    """
    x1, cond = batch
    B = x1.shape[0]
    t = rng.uniform(0.0, 1.0, size=B)
    zz = rng.standard_normal((2,) + x1.shape)
    z = zz[0] + 1j * zz[1]
    x_t = flow.sample_xt(x1, t, z, flow_params)
    u = flow.target_field(x_t, x1, t, flow_params)
    model.zero_grad()
    with Tape() as tape:
        v = model.forward(dsp.pack(x_t), dsp.pack(cond), t)
        loss = flow.cfm_loss(v, dsp.pack(u).astype(model.dtype))
    tape.backward(loss)
    named = list(model.named_parameters())
    grad_norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in named)))
    value = float(loss.data)
    if not (np.isfinite(value) and np.isfinite(grad_norm)):
        raise NumericError(
            "non-finite training loss: "
            + json.dumps({"step": optim.step, "t": t.tolist(), "loss": repr(value),
                          "grad_norms": {n: float(np.linalg.norm(p.grad)) for n, p in named}})
        )
    adam_step(named, optim, lr, betas, eps)
    return value, grad_norm


@dataclass
class TrainResult:
    model: object
    optim: OptimState
    losses: list
    grad_norms: list


LOSS_HEADER = ["step", "loss", "grad_norm", "wall_time"]


def train(cfg: TrainConfig, out_dir=None, model=None, optim: OptimState | None = None,
          progress=None) -> TrainResult:
    """Run (or resume) training until ``optim.step == cfg.steps``.

    With ``out_dir``, appends to ``loss.csv`` and writes ``checkpoint.sfm``
    every ``checkpoint_interval`` steps and at the end.
    """
    if model is None:
        model = build_model(cfg.model if cfg.model else cfg.preset,
                            sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max)
    mc = model.cfg
    if mc.output == "data" and (mc.sigma_min, mc.sigma_max) != (cfg.sigma_min, cfg.sigma_max):
        raise ConfigError("model output parametrization uses different sigma_min/sigma_max than training")
    optim = optim or OptimState.for_model(model)
    data = _Data(cfg)
    out = Path(out_dir) if out_dir else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        fresh = optim.step == 0 or not csv_path.exists()
        fh = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_HEADER)
    losses, norms = [], []
    t0 = time.perf_counter()
    try:
        while optim.step < cfg.steps:
            step = optim.step
            batch = make_batch(data, step)
            rng = _item_rng(cfg.seed, step, _FLOW_STREAM)
            loss, gn = train_step(model, batch, cfg.flow, optim, rng, cfg.learning_rate, cfg.betas, cfg.eps)
            losses.append(loss)
            norms.append(gn)
            if writer is not None:
                writer.writerow([step, repr(loss), repr(gn), f"{time.perf_counter() - t0:.3f}"])
            if progress is not None:
                progress(step, loss)
            if out is not None and cfg.checkpoint_interval and optim.step % cfg.checkpoint_interval == 0:
                save_checkpoint(model, optim, cfg, out / "checkpoint.sfm")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(model, optim, cfg, out / "checkpoint.sfm")
    return TrainResult(model, optim, losses, norms)


def save_checkpoint(model, optim: OptimState | None, config: TrainConfig | None, path) -> None:
    meta = {
        "format": "streamfm",
        "model_config": config_to_dict(model.cfg),
        "train_config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "optim_step": optim.step if optim is not None else 0,
    }
    arrays = {}
    for name, p in model.named_parameters():
        arrays["param/" + name] = p.data
    if optim is not None:
        for name, _ in model.named_parameters():
            arrays["adam_m/" + name] = optim.m[name]
            arrays["adam_v/" + name] = optim.v[name]
    write_checkpoint(path, meta, arrays)


def load_checkpoint(path):
    """Returns ``(model, optim, train_config)``; optim/config may be None."""
    meta, arrays = read_checkpoint(path)
    if meta.get("format") != "streamfm":
        raise ConfigError(f"{path}: not a streamfm checkpoint")
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    dtype = next(iter(params.values())).dtype if params else np.float64
    model = build_model(config_from_dict(meta["model_config"]), dtype=dtype)
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise ConfigError(f"{path}: parameter names do not match the model config")
    for name, p in named.items():
        if p.data.shape != params[name].shape:
            raise ConfigError(f"{path}: shape mismatch for {name}")
        p.data[...] = params[name]
    optim = None
    if any(k.startswith("adam_m/") for k in arrays):
        optim = OptimState(
            {n: arrays["adam_m/" + n].copy() for n in named},
            {n: arrays["adam_v/" + n].copy() for n in named},
            int(meta["optim_step"]),
        )
    cfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return model, optim, cfg


def load_model(path):
    return load_checkpoint(path)[0]
