"""Layer vocabulary for the backbones.

Layers are callables over :class:`Tensor` activations ``(B, C, F, L)``. Each
temporal layer accepts an optional ``cache`` dict; when given, the layer reads
its left context (conv history, running norm statistics) from the cache and
writes the updated context back, which is how streaming inference advances a
network one chunk at a time with the offline code path.

``materialize=False`` builds a layer with shapes only (no weight arrays) so
full-scale configurations can be complexity-counted without allocating them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Parameter, Tensor

__all__ = [
    "CostItem",
    "Module",
    "Conv",
    "DepthwiseSeparable",
    "GluConv",
    "CumGroupNorm",
    "Linear",
    "GaussianFourierEmbed",
    "TimeMLP",
    "FreqDown",
    "FreqUp",
    "Sequential",
    "gaussian_fourier_embed",
    "freq_downsample",
    "freq_upsample",
]


@dataclass
class CostItem:
    """Per-layer complexity contribution.

    ``span`` is the number of past frames the layer reaches back, ``(k-1)*d``.
    ``on_path`` marks layers whose span counts toward the receptive field
    (parallel branches are counted once).
    """

    name: str
    params: int
    macs_per_frame: int
    span: int = 0
    on_path: bool = True


class Module:
    """Minimal container: tracks child modules and parameters in definition order."""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_params", {})

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, Parameter):
            self._params[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key, p in self._params.items():
            yield prefix + key, p
        for key, child in self._children.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cost_items(self, n_freq: int) -> tuple[list[CostItem], int]:
        raise NotImplementedError

    def _param(self, name, shape, rng, init, dtype):
        """Create (or, for shape-only builds, describe) a parameter."""
        if rng is None:
            object.__setattr__(self, name, None)
            self.__dict__.setdefault("_shapes", {})[name] = tuple(shape)
            return
        if init == "zeros":
            value = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            value = np.ones(shape, dtype=dtype)
        else:  # kaiming-uniform on the given fan-in
            bound = np.sqrt(6.0 / init)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        setattr(self, name, Parameter(value, name))
        self.__dict__.setdefault("_shapes", {})[name] = tuple(shape)

    def own_param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.__dict__.get("_shapes", {}).values()))


class Conv(Module):
    """Grouped convolution, causal along frames (kernel ``kt``, dilation ``d``)."""

    def __init__(
        self,
        c_in,
        c_out,
        kt=1,
        *,
        kf=1,
        dilation=1,
        f_stride=1,
        f_pad=None,
        groups=1,
        bias=True,
        rng=None,
        dtype=np.float64,
        name="conv",
    ):
        super().__init__()
        if kt < 1 or kf < 1 or dilation < 1 or f_stride < 1:
            raise ConfigError("kernel sizes, dilation and stride must be >= 1")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
        self.c_in, self.c_out, self.kt, self.kf = c_in, c_out, kt, kf
        self.dilation, self.f_stride, self.groups = dilation, f_stride, groups
        self.f_pad = (kf - 1) // 2 if f_pad is None else f_pad
        self.name = name
        self.has_bias = bias
        fan_in = (c_in // groups) * kf * kt
        self._param("weight", (c_out, c_in // groups, kf, kt), rng, fan_in, dtype)
        if bias:
            self._param("bias", (c_out,), rng, "zeros", dtype)
        else:
            self.bias = None

    @property
    def span(self) -> int:
        return (self.kt - 1) * self.dilation

    def out_freq(self, n_freq: int) -> int:
        return (n_freq + 2 * self.f_pad - self.kf) // self.f_stride + 1

    def __call__(self, x: Tensor, cache: dict | None = None) -> Tensor:
        hist = None
        if cache is not None and self.span:
            hist = cache.get(self)
            if hist is None:
                B, C, F, _ = x.shape
                hist = np.zeros((B, C, F, self.span), dtype=x.data.dtype)
        out = ops.conv(
            x,
            self.weight,
            self.bias,
            dilation=self.dilation,
            f_stride=self.f_stride,
            f_pad=self.f_pad,
            groups=self.groups,
            history=hist,
        )
        if cache is not None and self.span:
            cache[self] = np.concatenate([hist, x.data], axis=-1)[..., -self.span :]
        return out

    def cost_items(self, n_freq):
        fo = self.out_freq(n_freq)
        macs = self.c_out * (self.c_in // self.groups) * self.kf * self.kt * fo
        return [CostItem(self.name, self.own_param_count(), macs, self.span)], fo


class DepthwiseSeparable(Module):
    """Per-channel causal conv followed by a 1x1 channel-mixing conv."""

    def __init__(self, c_in, c_out, kt, dilation=1, *, rng=None, dtype=np.float64, name="ds"):
        super().__init__()
        self.name = name
        self.depthwise = Conv(
            c_in, c_in, kt, dilation=dilation, groups=c_in, rng=rng, dtype=dtype, name=name + ".dw"
        )
        self.pointwise = Conv(c_in, c_out, 1, rng=rng, dtype=dtype, name=name + ".pw")

    @property
    def span(self):
        return self.depthwise.span

    def __call__(self, x, cache=None):
        return self.pointwise(self.depthwise(x, cache), cache)

    def cost_items(self, n_freq):
        a, f = self.depthwise.cost_items(n_freq)
        b, f = self.pointwise.cost_items(f)
        return a + b, f


class GluConv(Module):
    """``linear(x) * tanh(gate(x) + time_bias)``: two parallel conv paths.

    ``separable`` selects depthwise-separable paths (temporal kernel ``kt``);
    otherwise both paths are plain 1x1 convs.
    """

    def __init__(
        self,
        c_in,
        c_out,
        kt=1,
        dilation=1,
        *,
        separable=True,
        emb_dim=None,
        rng=None,
        dtype=np.float64,
        name="glu",
    ):
        super().__init__()
        self.name = name
        self.c_out = c_out
        if separable:
            self.lin = DepthwiseSeparable(c_in, c_out, kt, dilation, rng=rng, dtype=dtype, name=name + ".lin")
            self.gate = DepthwiseSeparable(c_in, c_out, kt, dilation, rng=rng, dtype=dtype, name=name + ".gate")
        else:
            if kt != 1:
                raise ConfigError("plain GLU paths are 1x1")
            self.lin = Conv(c_in, c_out, 1, rng=rng, dtype=dtype, name=name + ".lin")
            self.gate = Conv(c_in, c_out, 1, rng=rng, dtype=dtype, name=name + ".gate")
        self.time = Linear(emb_dim, c_out, rng=rng, dtype=dtype, name=name + ".time") if emb_dim else None

    @property
    def span(self):
        return getattr(self.lin, "span", 0)

    def __call__(self, x, emb=None, cache=None):
        g = self.gate(x, cache)
        if self.time is not None:
            g = ops.add(g, ops.reshape(self.time(emb), (emb.shape[0], self.c_out, 1, 1)))
        return ops.mul(self.lin(x, cache), ops.tanh(g))

    def cost_items(self, n_freq):
        a, f = self.lin.cost_items(n_freq)
        b, _ = self.gate.cost_items(n_freq)
        for item in b:
            item.on_path = False
        extra = []
        if self.time is not None:
            extra = [CostItem(self.time.name, self.time.own_param_count(), 0)]
        return a + b + extra, f


class CumGroupNorm(Module):
    def __init__(self, channels, groups, eps=1e-6, *, rng=None, dtype=np.float64, name="norm"):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible into {groups} groups")
        self.groups, self.eps, self.name = groups, eps, name
        self._param("gamma", (channels,), rng, "ones", dtype)
        self._param("beta", (channels,), rng, "zeros", dtype)

    def __call__(self, x, cache=None):
        state = cache.get(self) if cache is not None else None
        out, new_state = ops.cum_group_norm(x, self.gamma, self.beta, self.groups, self.eps, state)
        if cache is not None:
            cache[self] = new_state
        return out

    def cost_items(self, n_freq):
        return [CostItem(self.name, self.own_param_count(), 0)], n_freq


class Linear(Module):
    def __init__(self, d_in, d_out, *, rng=None, dtype=np.float64, name="linear"):
        super().__init__()
        self.name = name
        self._param("weight", (d_out, d_in), rng, d_in, dtype)
        self._param("bias", (d_out,), rng, "zeros", dtype)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


def gaussian_fourier_embed(t, freqs: np.ndarray) -> np.ndarray:
    """``[sin(2 pi f_i t)..., cos(2 pi f_i t)...]`` for scalar or ``(B,)`` times."""
    t = np.atleast_1d(np.asarray(t, dtype=freqs.dtype))
    arg = 2 * np.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class GaussianFourierEmbed:
    """Fixed random Fourier features of the flow time (not trainable)."""

    def __init__(self, dim: int, scale: float = 16.0, seed: int = 0, dtype=np.float64):
        if dim % 2:
            raise ConfigError(f"embedding dim must be even, got {dim}")
        self.dim = dim
        self.freqs = (np.random.default_rng(seed).standard_normal(dim // 2) * scale).astype(dtype)

    def __call__(self, t) -> np.ndarray:
        return gaussian_fourier_embed(t, self.freqs)


class TimeMLP(Module):
    """Fourier features -> Linear -> SiLU -> Linear -> SiLU."""

    def __init__(self, fourier_dim, hidden, *, seed=0, scale=16.0, rng=None, dtype=np.float64):
        super().__init__()
        self.fourier = GaussianFourierEmbed(fourier_dim, scale, seed, dtype)
        self.fc1 = Linear(fourier_dim, hidden, rng=rng, dtype=dtype, name="time.fc1")
        self.fc2 = Linear(hidden, hidden, rng=rng, dtype=dtype, name="time.fc2")
        self.dim = hidden

    def __call__(self, t):
        e = Tensor(self.fourier(t))
        return ops.silu(self.fc2(ops.silu(self.fc1(e))))

    def cost_items(self, n_freq):
        n = self.fc1.own_param_count() + self.fc2.own_param_count()
        return [CostItem("time_mlp", n, 0)], n_freq


class FreqDown(Module):
    """Stride-2 convolution along frequency (kernel 3, pad 1); frames untouched."""

    def __init__(self, c_in, c_out, *, rng=None, dtype=np.float64, name="down"):
        super().__init__()
        self.conv = Conv(c_in, c_out, 1, kf=3, f_stride=2, f_pad=1, rng=rng, dtype=dtype, name=name)

    def __call__(self, x, cache=None):
        if x.shape[2] % 2:
            raise ConfigError(f"frequency downsampling needs an even bin count, got {x.shape[2]}")
        return self.conv(x)

    def cost_items(self, n_freq):
        return self.conv.cost_items(n_freq)


class FreqUp(Module):
    """Nearest-neighbour x2 along frequency followed by a kernel-3 frequency conv."""

    def __init__(self, c_in, c_out, *, rng=None, dtype=np.float64, name="up"):
        super().__init__()
        self.conv = Conv(c_in, c_out, 1, kf=3, f_pad=1, rng=rng, dtype=dtype, name=name)

    def __call__(self, x, cache=None):
        return self.conv(ops.repeat_freq(x, 2))

    def cost_items(self, n_freq):
        return self.conv.cost_items(2 * n_freq)


def freq_downsample(x, layer: FreqDown):
    return layer(x)


def freq_upsample(x, layer: FreqUp):
    return layer(x)


class Sequential(Module):
    """Chain of single-input layers (used for plain causal stacks)."""

    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"l{i}", layer)

    def __call__(self, x, cache=None):
        for layer in self.layers:
            x = layer(x, cache)
        return x

    def cost_items(self, n_freq):
        items = []
        for layer in self.layers:
            more, n_freq = layer.cost_items(n_freq)
            items += more
        return items, n_freq
