"""Why few steps can be enough: the conditional OT path is straight.

With the exact conditional field, one Euler step lands on the target; with a
Gaussian-posterior field (a fixed Wiener gain on the condition), every NFE
lands on the same point. A learned field sits between the two cases.
"""

import numpy as np

from streamfm import flow

rng = np.random.default_rng(0)
x1 = rng.standard_normal(6) + 1j * rng.standard_normal(6)
z = rng.standard_normal(6) + 1j * rng.standard_normal(6)
p = flow.DEFAULT_FLOW

exact = lambda x, c, t: flow.target_field(x, x1, t, p)
for nfe in (1, 2, 5, 20):
    out = flow.integrate_ode(exact, p.sigma_max * z, None, flow.SamplerConfig(nfe))
    err = np.max(np.abs(out - (x1 + p.sigma_min * z)))
    print(f"exact conditional field, NFE={nfe:>2}: max |x(1) - (x1 + sigma_min z)| = {err:.1e}")

# printed form of the target field vs the one used for training
t = 0.4
xt = flow.sample_xt(x1, t, z, p)
gap = np.max(np.abs(flow.target_field_as_printed(xt, x1, t, p) - flow.target_field(xt, x1, t, p)))
print(f"as-printed target field differs from the path derivative by {gap:.3f} at t={t}")
