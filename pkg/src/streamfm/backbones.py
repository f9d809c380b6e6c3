"""Velocity-field backbones and the complexity counter.

Two causal architectures, both with temporal stride 1 end to end:

* ``ConvGluUnet`` treats the packed spectrogram (``2F`` real channels for the
  flow state plus ``2F`` for the noisy condition) as channels of a 1-D signal.
  Encoder levels are depthwise-separable tanh-GLUs with kernel 2, the
  bottleneck a kernel-7 GLU, the decoder plain 1x1 GLUs with 1x1 linear skips.
* ``CausalFreqUnet`` is a 2-D U-Net over (frequency, frames) that halves the
  frequency axis at each of its scales, with causal kernel-2 temporal convs and
  cumulative group norm.

Both take the flow time through Fourier features and an MLP and add a
per-channel projection of that embedding inside every block.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dsp, flow
from .errors import ConfigError
from .nn import ops
from .nn.layers import (
    Conv,
    CostItem,
    CumGroupNorm,
    FreqDown,
    FreqUp,
    GluConv,
    Linear,
    Module,
    TimeMLP,
)
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "ConvGluUnetConfig",
    "CausalFreqUnetConfig",
    "ConvGluUnet",
    "CausalFreqUnet",
    "ComplexityReport",
    "PRESETS",
    "REFERENCE_COMPLEXITY",
    "build_convglu_unet",
    "build_causal_freq_unet",
    "build_model",
    "config_from_dict",
    "count_complexity",
]


@dataclass(frozen=True)
class ConvGluUnetConfig:
    encoder_channels: tuple = (32, 16, 8)
    encoder_kernel: int = 2
    dilations: tuple | None = None  # default: 1, 2, 4, ... per level
    repeats: int = 1
    bottleneck_kernel: int = 7
    bottleneck_dilation: int = 1
    decoder_kernel: int = 1
    n_bins: int = 161
    fourier_dim: int = 16
    time_dim: int = 32
    seed: int = 0
    output: str = "data"  # "data": v = a(t) x_t + b(t) F; "velocity": v = F
    input_scaling: bool = True  # feed x_t / std(x_t) and cond / sigma_data to the network
    sigma_min: float = 1e-4
    sigma_max: float = 1.0
    sigma_data: float = 0.05
    kind: str = "convglu"

    def __post_init__(self):
        if self.output not in ("data", "velocity"):
            raise ConfigError(f"output must be 'data' or 'velocity', got {self.output!r}")
        if not (self.sigma_max > self.sigma_min >= 0 and self.sigma_data > 0):
            raise ConfigError("need sigma_max > sigma_min >= 0 and sigma_data > 0")
        chans = tuple(int(c) for c in self.encoder_channels)
        object.__setattr__(self, "encoder_channels", chans)
        if not chans or min(chans) < 1:
            raise ConfigError("encoder_channels must be a non-empty list of positive ints")
        if self.dilations is None:
            object.__setattr__(self, "dilations", tuple(2 ** i for i in range(len(chans))))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != len(chans):
            raise ConfigError("need one dilation per encoder level")
        if self.encoder_kernel < 1 or self.bottleneck_kernel < 1 or self.repeats < 1:
            raise ConfigError("kernels and repeats must be >= 1")
        if self.decoder_kernel != 1:
            raise ConfigError("the decoder has no temporal operations (decoder_kernel must be 1)")
        if any(a <= b for a, b in zip(chans, chans[1:])):
            log.warning("encoder channels %s are not strictly decreasing", chans)

    @property
    def input_channels(self) -> int:
        return 4 * self.n_bins


@dataclass(frozen=True)
class CausalFreqUnetConfig:
    widths: tuple = (8, 16, 24, 32, 40)
    num_scales: int = 5
    freq_stride: int = 2
    temporal_stride: int = 1
    groups: int = 4
    n_bins: int = 161
    pad_freq: bool = True  # zero-pad the bins up to a multiple of 2**num_scales
    fourier_dim: int = 16
    time_dim: int = 32
    seed: int = 0
    output: str = "data"  # "data": v = a(t) x_t + b(t) F; "velocity": v = F
    input_scaling: bool = True  # feed x_t / std(x_t) and cond / sigma_data to the network
    sigma_min: float = 1e-4
    sigma_max: float = 1.0
    sigma_data: float = 0.05
    kind: str = "freq_unet"

    def __post_init__(self):
        if self.output not in ("data", "velocity"):
            raise ConfigError(f"output must be 'data' or 'velocity', got {self.output!r}")
        if not (self.sigma_max > self.sigma_min >= 0 and self.sigma_data > 0):
            raise ConfigError("need sigma_max > sigma_min >= 0 and sigma_data > 0")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != self.num_scales:
            raise ConfigError(f"need {self.num_scales} widths, got {len(self.widths)}")
        if self.freq_stride != 2:
            raise ConfigError("frequency stride is fixed at 2")
        if self.temporal_stride != 1:
            raise ConfigError("temporal downsampling is not supported (temporal_stride must be 1)")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible into {self.groups} norm groups")
        m = 2 ** self.num_scales
        if not self.pad_freq and self.n_bins % m:
            raise ConfigError(f"{self.n_bins} bins not divisible by 2**num_scales = {m} (enable pad_freq)")

    @property
    def padded_bins(self) -> int:
        m = 2 ** self.num_scales
        return -(-self.n_bins // m) * m if self.pad_freq else self.n_bins


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Backbone(Module):
    causal = True

    def __init__(self, cfg, dtype):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)

    def _inputs(self, x_t, cond, t):
        """Network inputs: unit-scale versions of ``x_t`` and ``cond``."""
        if not self.cfg.input_scaling:
            return x_t, cond
        p = flow.FlowPathParams(self.cfg.sigma_min, self.cfg.sigma_max)
        k = flow.input_scale(np.asarray(t, dtype=float), p, self.cfg.sigma_data)
        k = Tensor(np.broadcast_to(k, (x_t.shape[0],)).reshape(-1, 1, 1).astype(self.dtype))
        return ops.mul(x_t, k), ops.scale(cond, 1.0 / self.cfg.sigma_data)

    def _output(self, x_t, out, t) -> Tensor:
        """Combine the network output ``F`` with the analytic skip on ``x_t``."""
        if self.cfg.output == "velocity":
            return out
        p = flow.FlowPathParams(self.cfg.sigma_min, self.cfg.sigma_max)
        a, b = flow.output_coefficients(np.asarray(t, dtype=float), p, self.cfg.sigma_data)
        shape = (-1, 1, 1)
        a = Tensor(np.broadcast_to(a, (x_t.shape[0],)).reshape(shape).astype(self.dtype))
        b = Tensor(np.broadcast_to(b, (x_t.shape[0],)).reshape(shape).astype(self.dtype))
        return ops.add(ops.mul(x_t, a), ops.mul(out, b))

    def velocity(self, x, cond, t, cache=None):
        """Complex-in, complex-out field evaluation (no gradient tracking).

        ``x`` and ``cond`` are ``(F, L)`` or ``(B, F, L)`` complex arrays.
        """
        single = np.ndim(x) == 2
        xp = dsp.pack(np.asarray(x))
        cp = dsp.pack(np.asarray(cond))
        if single:
            xp, cp = xp[None], cp[None]
        t = np.broadcast_to(np.asarray(t, dtype=float), (xp.shape[0],))
        out = dsp.unpack(self.forward(xp, cp, t, cache).data)
        return out[0] if single else out

    def cost_items(self, n_freq=None):
        raise NotImplementedError


class ConvGluUnet(_Backbone):
    def __init__(self, cfg: ConvGluUnetConfig, dtype=np.float64, materialize=True):
        super().__init__(cfg, dtype)
        rng = np.random.default_rng(cfg.seed) if materialize else None
        kw = dict(rng=rng, dtype=dtype)
        f2 = 2 * cfg.n_bins
        emb = cfg.time_dim
        self.time_mlp = TimeMLP(cfg.fourier_dim, emb, seed=cfg.seed, rng=rng, dtype=dtype)
        self.encoder = []
        c_prev = cfg.input_channels
        for lvl, (c, d) in enumerate(zip(cfg.encoder_channels, cfg.dilations)):
            level = []
            for r in range(cfg.repeats):
                layer = GluConv(
                    c_prev, c, cfg.encoder_kernel, d, emb_dim=emb, name=f"enc{lvl}.{r}", **kw
                )
                setattr(self, f"enc{lvl}_{r}", layer)
                level.append(layer)
                c_prev = c
            self.encoder.append(level)
        self.bottleneck = GluConv(
            c_prev, c_prev, cfg.bottleneck_kernel, cfg.bottleneck_dilation,
            emb_dim=emb, name="bottleneck", **kw,
        )
        self.decoder = []
        self.skips = []
        chans = cfg.encoder_channels
        for lvl in reversed(range(len(chans))):
            c_in = chans[lvl + 1] if lvl + 1 < len(chans) else chans[-1]
            dec = GluConv(c_in, chans[lvl], separable=False, emb_dim=emb, name=f"dec{lvl}", **kw)
            skip = Conv(chans[lvl], chans[lvl], 1, name=f"skip{lvl}", **kw)
            setattr(self, f"dec{lvl}", dec)
            setattr(self, f"skip{lvl}", skip)
            self.decoder.append(dec)
            self.skips.append(skip)
        # output GLU: decoder features plus per-bin linear maps of the inputs
        self.out_lin = Conv(chans[0], f2, 1, name="out.lin", **kw)
        self.out_gate = Conv(chans[0], f2, 1, name="out.gate", **kw)
        self.in_lin_x = Conv(f2, f2, 1, groups=f2, bias=False, name="in.lin_x", **kw)
        self.in_lin_c = Conv(f2, f2, 1, groups=f2, bias=False, name="in.lin_c", **kw)
        self.in_gate_x = Conv(f2, f2, 1, groups=f2, bias=False, name="in.gate_x", **kw)
        self.in_gate_c = Conv(f2, f2, 1, groups=f2, bias=False, name="in.gate_c", **kw)
        self.out_time = Linear(emb, f2, name="out.time", **kw)
        if materialize:
            # zero linear paths: the untrained field is exactly 0
            for m in (self.out_lin, self.in_lin_x, self.in_lin_c):
                m.weight.data[...] = 0.0

    def forward(self, x_t, cond, t, cache=None) -> Tensor:
        """Packed ``(B, 2F, L)`` state and condition -> packed velocity."""
        x_t = _as_tensor(x_t, self.dtype)
        cond = _as_tensor(cond, self.dtype)
        B, f2, L = x_t.shape
        if f2 != 2 * self.cfg.n_bins or cond.shape != x_t.shape:
            raise ConfigError(f"expected inputs of shape (B, {2 * self.cfg.n_bins}, L)")
        x_in, c_in = self._inputs(x_t, cond, t)
        xt4 = ops.reshape(x_in, (B, f2, 1, L))
        c4 = ops.reshape(c_in, (B, f2, 1, L))
        emb = self.time_mlp(np.asarray(t, dtype=self.dtype))
        h = ops.concat([xt4, c4], axis=1)
        feats = []
        for level in self.encoder:
            for layer in level:
                h = layer(h, emb, cache)
            feats.append(h)
        h = self.bottleneck(h, emb, cache)
        for dec, skip, feat in zip(self.decoder, self.skips, reversed(feats)):
            h = ops.add(dec(h, emb, cache), skip(feat, cache))
        lin = ops.add(self.out_lin(h), ops.add(self.in_lin_x(xt4), self.in_lin_c(c4)))
        gate = ops.add(self.out_gate(h), ops.add(self.in_gate_x(xt4), self.in_gate_c(c4)))
        gate = ops.add(gate, ops.reshape(self.out_time(emb), (B, f2, 1, 1)))
        return self._output(x_t, ops.reshape(ops.mul(lin, ops.tanh(gate)), (B, f2, L)), t)

    def cost_items(self, n_freq=None):
        items, _ = self.time_mlp.cost_items(1)
        for level in self.encoder:
            for layer in level:
                items += layer.cost_items(1)[0]
        items += self.bottleneck.cost_items(1)[0]
        for dec, skip in zip(self.decoder, self.skips):
            items += dec.cost_items(1)[0] + skip.cost_items(1)[0]
        for m in (self.out_lin, self.out_gate, self.in_lin_x, self.in_lin_c, self.in_gate_x, self.in_gate_c):
            items += m.cost_items(1)[0]
        items.append(CostItem("out.time", self.out_time.own_param_count(), 0))
        return items


class _ResBlock(Module):
    """conv -> +time -> cumGN -> SiLU -> conv -> cumGN -> SiLU, plus residual."""

    def __init__(self, c_in, c_out, groups, emb, *, rng, dtype, name):
        super().__init__()
        kw = dict(rng=rng, dtype=dtype)
        self.c_out = c_out
        self.conv1 = Conv(c_in, c_out, 2, kf=3, name=name + ".conv1", **kw)
        self.time = Linear(emb, c_out, name=name + ".time", **kw)
        self.norm1 = CumGroupNorm(c_out, groups, name=name + ".norm1", **kw)
        self.conv2 = Conv(c_out, c_out, 2, kf=3, name=name + ".conv2", **kw)
        self.norm2 = CumGroupNorm(c_out, groups, name=name + ".norm2", **kw)
        self.res = Conv(c_in, c_out, 1, name=name + ".res", **kw) if c_in != c_out else None

    def __call__(self, x, emb, cache=None):
        h = self.conv1(x, cache)
        h = ops.add(h, ops.reshape(self.time(emb), (emb.shape[0], self.c_out, 1, 1)))
        h = ops.silu(self.norm1(h, cache))
        h = ops.silu(self.norm2(self.conv2(h, cache), cache))
        return ops.add(h, self.res(x) if self.res is not None else x)

    def cost_items(self, n_freq):
        items = self.conv1.cost_items(n_freq)[0]
        items.append(CostItem(self.time.name, self.time.own_param_count(), 0))
        items += self.norm1.cost_items(n_freq)[0]
        items += self.conv2.cost_items(n_freq)[0]
        items += self.norm2.cost_items(n_freq)[0]
        if self.res is not None:
            items += self.res.cost_items(n_freq)[0]
        return items, n_freq


class CausalFreqUnet(_Backbone):
    def __init__(self, cfg: CausalFreqUnetConfig, dtype=np.float64, materialize=True):
        super().__init__(cfg, dtype)
        rng = np.random.default_rng(cfg.seed) if materialize else None
        kw = dict(rng=rng, dtype=dtype)
        w = cfg.widths
        emb = cfg.time_dim
        self.time_mlp = TimeMLP(cfg.fourier_dim, emb, seed=cfg.seed, rng=rng, dtype=dtype)
        self.in_conv = Conv(4, w[0], 2, kf=3, name="in_conv", **kw)
        self.enc, self.down, self.up, self.dec = [], [], [], []
        for s in range(cfg.num_scales):
            nxt = w[s + 1] if s + 1 < cfg.num_scales else w[-1]
            blk = _ResBlock(w[s], w[s], cfg.groups, emb, name=f"enc{s}", **kw)
            down = FreqDown(w[s], nxt, name=f"down{s}", **kw)
            setattr(self, f"enc{s}", blk)
            setattr(self, f"down{s}", down)
            self.enc.append(blk)
            self.down.append(down)
        self.mid = _ResBlock(w[-1], w[-1], cfg.groups, emb, name="mid", **kw)
        for s in reversed(range(cfg.num_scales)):
            prev = w[s + 1] if s + 1 < cfg.num_scales else w[-1]
            up = FreqUp(prev, w[s], name=f"up{s}", **kw)
            blk = _ResBlock(w[s], w[s], cfg.groups, emb, name=f"dec{s}", **kw)
            setattr(self, f"up{s}", up)
            setattr(self, f"dec{s}", blk)
            self.up.append(up)
            self.dec.append(blk)
        self.out_conv = Conv(w[0], 2, 1, kf=3, name="out_conv", **kw)
        if materialize:
            self.out_conv.weight.data[...] = 0.0

    def forward(self, x_t, cond, t, cache=None) -> Tensor:
        x_t = _as_tensor(x_t, self.dtype)
        cond = _as_tensor(cond, self.dtype)
        B, f2, L = x_t.shape
        F = self.cfg.n_bins
        if f2 != 2 * F or cond.shape != x_t.shape:
            raise ConfigError(f"expected inputs of shape (B, {2 * F}, L)")
        # (B, 2F, L) -> (B, 2, F, L) for state and condition, stacked to 4 channels
        x_in, c_in = self._inputs(x_t, cond, t)
        h = ops.concat([ops.reshape(x_in, (B, 2, F, L)), ops.reshape(c_in, (B, 2, F, L))], axis=1)
        h = ops.pad_freq(h, 0, self.cfg.padded_bins - F)
        emb = self.time_mlp(np.asarray(t, dtype=self.dtype))
        h = self.in_conv(h, cache)
        feats = []
        for blk, down in zip(self.enc, self.down):
            h = blk(h, emb, cache)
            feats.append(h)
            h = down(h)
        h = self.mid(h, emb, cache)
        for up, blk, feat in zip(self.up, self.dec, reversed(feats)):
            h = blk(ops.add(up(h), feat), emb, cache)
        out = ops.crop_freq(self.out_conv(h), 0, F)
        return self._output(x_t, ops.reshape(out, (B, f2, L)), t)

    def internal_shapes(self, n_frames: int = 3):
        """Activation shapes at every scale for a random input (diagnostics)."""
        F = self.cfg.n_bins
        x = np.zeros((1, 2 * F, n_frames), dtype=self.dtype)
        shapes = []
        orig = ops.conv

        def spy(*a, **k):
            out = orig(*a, **k)
            shapes.append(out.shape)
            return out

        ops.conv = spy
        try:
            self.forward(x, x, np.zeros(1))
        finally:
            ops.conv = orig
        return shapes

    def cost_items(self, n_freq=None):
        fp = self.cfg.padded_bins
        items, _ = self.time_mlp.cost_items(fp)
        more, f = self.in_conv.cost_items(fp)
        items += more
        for blk, down in zip(self.enc, self.down):
            items += blk.cost_items(f)[0]
            more, f = down.cost_items(f)
            items += more
        items += self.mid.cost_items(f)[0]
        for up, blk in zip(self.up, self.dec):
            more, f = up.cost_items(f)
            items += more + blk.cost_items(f)[0]
        items += self.out_conv.cost_items(f)[0]
        return items


def build_convglu_unet(cfg: ConvGluUnetConfig, dtype=np.float64, materialize=True) -> ConvGluUnet:
    return ConvGluUnet(cfg, dtype, materialize)


def build_causal_freq_unet(cfg: CausalFreqUnetConfig, dtype=np.float64, materialize=True) -> CausalFreqUnet:
    return CausalFreqUnet(cfg, dtype, materialize)


LARGE_CHANNELS = (4096, 2048, 1024, 512, 256, 128)

PRESETS = {
    "convglu-toy": ConvGluUnetConfig(encoder_channels=(32, 16, 8)),
    "convglu-base": ConvGluUnetConfig(encoder_channels=(1024, 512, 256, 128, 64, 32)),
    "convglu-large": ConvGluUnetConfig(encoder_channels=LARGE_CHANNELS),
    "freq-unet-lite": CausalFreqUnetConfig(widths=(8, 16, 24, 32, 40)),
}

# Reference rows: (params, MACs per second, receptive field in seconds)
REFERENCE_COMPLEXITY = {
    "Non-causal": (53.0e6, 65.69e9, 3.82),
    "Causal": (53.0e6, 142.78e9, 0.53),
    "ConvGLU-UNet-base": (6.02e6, 0.36e9, 0.75),
    "ConvGLU-UNet-large": (57.6e6, 3.5e9, 0.75),
}
PRESET_REFERENCE = {"convglu-base": "ConvGLU-UNet-base", "convglu-large": "ConvGLU-UNet-large"}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "convglu")
    cls = ConvGluUnetConfig if kind == "convglu" else CausalFreqUnetConfig
    if kind not in ("convglu", "freq_unet"):
        raise ConfigError(f"unknown model kind {kind!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(kind=kind, **d)


def config_to_dict(cfg) -> dict:
    out = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def build_model(cfg_or_preset, dtype=np.float64, materialize=True, **overrides):
    if isinstance(cfg_or_preset, str):
        if cfg_or_preset not in PRESETS:
            raise ConfigError(f"unknown preset {cfg_or_preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[cfg_or_preset]
    elif isinstance(cfg_or_preset, dict):
        cfg = config_from_dict(cfg_or_preset)
    else:
        cfg = cfg_or_preset
    if overrides:
        d = config_to_dict(cfg)
        d.update(overrides)
        cfg = config_from_dict(d)
    if isinstance(cfg, ConvGluUnetConfig):
        return build_convglu_unet(cfg, dtype, materialize)
    return build_causal_freq_unet(cfg, dtype, materialize)


@dataclass
class ComplexityReport:
    params: int
    macs_per_second: float
    receptive_field_seconds: float
    receptive_field_frames: int
    macs_per_frame: int
    items: list = field(default_factory=list, repr=False)

    def compare(self, reference: tuple) -> dict:
        """Ratios of this report to a ``(params, macs/s, rf_s)`` reference row."""
        p, m, r = reference
        return {
            "params_ratio": self.params / p,
            "macs_ratio": self.macs_per_second / m,
            "rf_ratio": self.receptive_field_seconds / r,
        }


def count_complexity(model, stft_cfg: dsp.StftConfig = dsp.DEFAULT_STFT) -> ComplexityReport:
    """Parameters, per-second MACs at the hop rate, and receptive field.

    MACs count multiply-accumulates in convolutions for one new frame; the
    time-embedding MLP runs once per field evaluation, not per frame, and is
    excluded. The receptive field is ``1 + sum((k - 1) * d)`` frames along the
    deepest temporal path, converted to seconds with the hop.
    """
    if hasattr(model, "cost_items"):
        items = model.cost_items(1)
        if isinstance(items, tuple):
            items = items[0]
    else:
        items = list(model)
    params = sum(i.params for i in items)
    macs = sum(i.macs_per_frame for i in items)
    rf = 1 + sum(i.span for i in items if i.on_path)
    return ComplexityReport(
        params=int(params),
        macs_per_second=macs * stft_cfg.frame_rate,
        receptive_field_seconds=rf * stft_cfg.hop_len / stft_cfg.sample_rate,
        receptive_field_frames=rf,
        macs_per_frame=int(macs),
        items=items,
    )
