"""Central finite-difference check of tape gradients."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tape

__all__ = ["check_gradients"]


def _loss(fn, probe):
    out = fn()
    return ops.total(ops.mul(out, probe))


def check_gradients(fn, params, h: float = 1e-5, n_entries: int = 12, seed: int = 0) -> dict:
    """Compare analytic and numerical gradients of ``sum(fn() * R)``.

    ``fn`` is a zero-argument callable building the output from ``params``
    (a dict name -> :class:`Parameter`, inputs included). ``R`` is a fixed
    random probe, so every output element contributes. For each parameter,
    up to ``n_entries`` random entries are perturbed by ``+-h``. Returns the
    relative error ``|fd - an| / max(|fd|, |an|)`` per parameter, computed on
    the vector of checked entries (0 when both are below ``1e-8``).
    """
    rng = np.random.default_rng(seed)
    out = fn()
    probe = rng.standard_normal(out.shape)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = _loss(fn, probe)
    tape.backward(loss)
    errors = {}
    for name, p in params.items():
        if not isinstance(p, Parameter):
            raise TypeError(f"{name} is not a Parameter")
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        an = p.grad.reshape(-1)[idx]
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(_loss(fn, probe).data)
            flat[i] = old - h
            down = float(_loss(fn, probe).data)
            flat[i] = old
            fd[j] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        # entries with no influence: both sides are rounding noise
        errors[name] = 0.0 if scale < 1e-8 else float(np.linalg.norm(fd - an) / scale)
    return errors
