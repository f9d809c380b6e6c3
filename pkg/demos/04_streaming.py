"""Frame-synchronous streaming: identical to offline causal processing.

Usage: python3 demos/04_streaming.py [checkpoint]
Without a checkpoint an untrained convglu-toy is used (its output is the
Gaussian-prior field, so the audio is not enhanced, but equality still holds).
"""

import sys

import numpy as np

from streamfm import backbones, dsp, evalkit, flow, stream, train

model = train.load_model(sys.argv[1]) if len(sys.argv) > 1 else backbones.build_model("convglu-toy")
clip = evalkit.make_testset(1, seed=1, duration=1.0)[0]
cfg = flow.SamplerConfig(5)

offline = flow.enhance_samples(clip.noisy, model, cfg, seed=0)
state = stream.open_stream(model, cfg, dsp.DEFAULT_STFT, seed=0)
chunks = [stream.push_samples(state, clip.noisy[i : i + 123]) for i in range(0, len(clip.noisy), 123)]
online = np.concatenate(chunks + [stream.flush(state)])
print(f"caches: {state.n_caches}, field evaluations: {state.field_evals}")
print(f"max |online - offline| = {np.max(np.abs(online - offline)):.1e}")
print(stream.measure_latency(dsp.DEFAULT_STFT, model, cfg, duration_s=1.0).to_text())
