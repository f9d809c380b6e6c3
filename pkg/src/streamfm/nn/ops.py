"""Differentiable primitives.

Every function takes :class:`Tensor` (or plain arrays for constants) and
returns a :class:`Tensor`; when a tape is active the op records a closure that
maps the output gradient to input gradients.

Activations use the layout ``(B, C, F, L)``: batch, channels, frequency, frames.
One-dimensional models use ``F = 1``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, make

__all__ = [
    "add", "sub", "mul", "scale", "tanh", "sigmoid", "silu", "linear",
    "conv", "cum_group_norm", "repeat_freq", "pad_freq", "crop_freq",
    "concat", "reshape", "mse", "total",
]


def _d(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return make(ad + bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return make(ad - bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    return make(_d(a) * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    y = np.tanh(_d(a))
    return make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * _d(a)))
    return make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    x = _d(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape ``(..., in)`` and ``w`` of ``(out, in)``."""
    xd, wd = _d(x), _d(w)
    y = xd @ wd.T
    if b is not None:
        y = y + _d(b)

    def back(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gw, gb

    return make(y, (x, w, b), back)


def conv(
    x,
    w,
    b=None,
    *,
    dilation: int = 1,
    f_stride: int = 1,
    f_pad: int = 0,
    groups: int = 1,
    history: np.ndarray | None = None,
) -> Tensor:
    """Grouped 2-D convolution, causal along frames.

    ``x``: ``(B, Cin, F, L)``; ``w``: ``(Cout, Cin // groups, kf, kt)``. Along
    frames the kernel spans ``x[..., l - (kt - 1) * dilation : l + 1]``;
    ``history`` supplies the ``(kt - 1) * dilation`` frames preceding ``x``
    (zeros when omitted). Frequency uses symmetric zero padding ``f_pad`` and
    stride ``f_stride``.
    """
    xd, wd = _d(x), _d(w)
    B, cin, F, L = xd.shape
    cout, cg, kf, kt = wd.shape
    G = groups
    if cin % G or cout % G or cin // G != cg:
        raise ConfigError(f"channel mismatch: x has {cin} channels, weight {wd.shape}, groups {G}")
    og = cout // G
    ctx = (kt - 1) * dilation
    if history is None:
        history = np.zeros((B, cin, F, ctx), dtype=xd.dtype)
    elif history.shape != (B, cin, F, ctx):
        raise ConfigError(f"history shape {history.shape} != {(B, cin, F, ctx)}")
    xp = np.concatenate([history, xd], axis=-1) if ctx else xd
    if f_pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (f_pad, f_pad), (0, 0)))
    fp = F + 2 * f_pad
    fo = (fp - kf) // f_stride + 1
    if fo < 1:
        raise ConfigError("frequency axis too short for kernel")
    xg = xp.reshape(B, G, cg, fp, L + ctx)
    wg = wd.reshape(G, og, cg, kf, kt)
    n = fo * L
    fstop = (fo - 1) * f_stride + 1

    def tap(i, j):
        return xg[:, :, :, i : i + fstop : f_stride, j * dilation : j * dilation + L].reshape(B, G, cg, n)

    out = np.zeros((B, G, og, n), dtype=np.result_type(xd, wd))
    for i in range(kf):
        for j in range(kt):
            xs = tap(i, j)
            wij = wg[:, :, :, i, j]
            if cg == 1:
                out += wij[None, :, :, 0, None] * xs
            elif out.dtype == np.float32:
                # BLAS sums in a shape-dependent order; a float64 accumulator makes
                # one-frame (streaming) and many-frame results round identically
                out += (wij.astype(np.float64) @ xs.astype(np.float64)).astype(np.float32)
            else:
                out += wij @ xs
    out = out.reshape(B, cout, fo, L)
    if b is not None:
        out = out + _d(b)[None, :, None, None]

    def back(g):
        gg = g.reshape(B, G, og, n)
        gw = np.zeros_like(wg)
        gxp = np.zeros((B, G, cg, fp, L + ctx), dtype=gg.dtype)
        for i in range(kf):
            for j in range(kt):
                xs = tap(i, j)
                wij = wg[:, :, :, i, j]
                if cg == 1:
                    gw[:, :, 0, i, j] = np.einsum("bgon,bgn->go", gg, xs[:, :, 0])
                    gxs = np.einsum("go,bgon->bgn", wij[:, :, 0], gg)[:, :, None]
                else:
                    gw[:, :, :, i, j] = (gg @ xs.transpose(0, 1, 3, 2)).sum(axis=0)
                    gxs = wij.transpose(0, 2, 1) @ gg
                gxp[:, :, :, i : i + fstop : f_stride, j * dilation : j * dilation + L] += (
                    gxs.reshape(B, G, cg, fo, L)
                )
        gx = gxp.reshape(B, cin, fp, L + ctx)[:, :, f_pad : f_pad + F, ctx:]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw.reshape(wd.shape), gb

    return make(out, (x, w, b), back)


def cum_group_norm(x, gamma, beta, groups: int, eps: float = 1e-6, state=None):
    """Group norm with statistics accumulated over frames ``0..l``.

    Frame ``l`` of ``x`` (shape ``(B, C, F, L)``) is normalized by the mean and
    variance over its group's channels, all frequencies and every frame up to
    and including ``l``. ``state = (sum, sum_sq, count)`` carries the running
    statistics from earlier chunks. Returns ``(out, new_state)``.
    """
    xd = _d(x)
    B, C, F, L = xd.shape
    if C % groups:
        raise ConfigError(f"{C} channels not divisible into {groups} groups")
    cg = C // groups
    xg = xd.reshape(B, groups, cg * F, L)
    if state is None:
        s1_0 = np.zeros((B, groups), dtype=xd.dtype)
        s2_0 = np.zeros((B, groups), dtype=xd.dtype)
        n0 = 0
    else:
        s1_0, s2_0, n0 = state
    f1 = xg.sum(axis=2)
    f2 = (xg * xg).sum(axis=2)
    S1 = np.cumsum(np.concatenate([s1_0[..., None], f1], axis=-1), axis=-1)[..., 1:]
    S2 = np.cumsum(np.concatenate([s2_0[..., None], f2], axis=-1), axis=-1)[..., 1:]
    cnt = n0 + cg * F * np.arange(1, L + 1, dtype=xd.dtype)
    m = S1 / cnt
    var = S2 / cnt - m * m
    r = 1.0 / np.sqrt(var + eps)
    xc = xg - m[:, :, None, :]
    y = (xc * r[:, :, None, :]).reshape(B, C, F, L)
    gd, bd = _d(gamma), _d(beta)
    out = y * gd[None, :, None, None] + bd[None, :, None, None]
    new_state = (S1[..., -1].copy(), S2[..., -1].copy(), n0 + cg * F * L)

    def back(g):
        ggamma = (g * y).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gy = (g * gd[None, :, None, None]).reshape(B, groups, cg * F, L)
        gx = gy * r[:, :, None, :]
        gm = -(gy.sum(axis=2)) * r
        gr = (gy * xc).sum(axis=2)
        gv = gr * (-0.5) * r ** 3
        gS2 = gv / cnt
        gm = gm + gv * (-2.0 * m)
        gS1 = gm / cnt
        gs1 = np.cumsum(gS1[..., ::-1], axis=-1)[..., ::-1]
        gs2 = np.cumsum(gS2[..., ::-1], axis=-1)[..., ::-1]
        gx = gx + gs1[:, :, None, :] + 2.0 * xg * gs2[:, :, None, :]
        return gx.reshape(B, C, F, L), ggamma, gbeta

    return make(out, (x, gamma, beta), back), new_state


def repeat_freq(x, factor: int = 2) -> Tensor:
    xd = _d(x)
    B, C, F, L = xd.shape
    return make(
        np.repeat(xd, factor, axis=2),
        (x,),
        lambda g: (g.reshape(B, C, F, factor, L).sum(axis=3),),
    )


def pad_freq(x, before: int, after: int) -> Tensor:
    xd = _d(x)
    F = xd.shape[2]
    return make(
        np.pad(xd, ((0, 0), (0, 0), (before, after), (0, 0))),
        (x,),
        lambda g: (g[:, :, before : before + F],),
    )


def crop_freq(x, start: int, stop: int) -> Tensor:
    xd = _d(x)

    def back(g):
        gx = np.zeros_like(xd)
        gx[:, :, start:stop] = g
        return (gx,)

    return make(xd[:, :, start:stop], (x,), back)


def concat(xs, axis: int = 1) -> Tensor:
    datas = [_d(x) for x in xs]
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(datas))
        )

    return make(np.concatenate(datas, axis=axis), tuple(xs), back)


def reshape(x, shape) -> Tensor:
    xd = _d(x)
    return make(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def mse(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    if ad.shape != bd.shape:
        raise ConfigError(f"shape mismatch: {ad.shape} vs {bd.shape}")
    diff = ad - bd
    n = diff.size
    return make(
        np.asarray(np.mean(diff * diff)),
        (a, b),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


def total(a) -> Tensor:
    ad = _d(a)
    return make(np.asarray(ad.sum()), (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))
