"""Build a degradation chain, apply it, and replay it from its provenance."""

import sys
import tempfile
from pathlib import Path

import numpy as np

from streamfm import degrade, dsp, evalkit, sources

clean = dsp.rms_normalize(dsp.AudioBuffer(sources.pseudo_speech(2.0, seed=3), 16000), -25.0)[0]
chain = degrade.sample_chain(np.random.default_rng(int(sys.argv[1]) if len(sys.argv) > 1 else 4), max_ops=3)
noisy, prov = degrade.compose_chain(clean, chain)
for step in prov:
    print(f"{step['kind']:<15} {step['params']}")
print(f"input SI-SDR {evalkit.si_sdr(clean.samples, noisy.samples):.2f} dB")

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "prov.yaml"
    degrade.save_chain(path, prov)
    again, _ = degrade.compose_chain(clean, degrade.load_chain(path))
    print("replay from provenance is bit-exact:", np.array_equal(again.samples, noisy.samples))
