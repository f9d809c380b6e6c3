"""Train convglu-toy on noisy pseudo-speech, then sweep NFE.

Usage: python3 demos/03_train_and_sweep.py [steps] [out_dir]
The acceptance run uses 5000 steps at lr 3e-4 (about 15 min on one CPU core).
Short runs like this one learn faster at lr 1e-3.
"""

import sys

from streamfm import evalkit, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = sys.argv[2] if len(sys.argv) > 2 else "demo_run"
cfg = train.TrainConfig(steps=steps, learning_rate=1e-3, degradations=("additive_noise",),
                        max_degradations=1, snr_db=(-5.0, 20.0), seed=1)
res = train.train(cfg, out, progress=lambda s, l: s % max(1, steps // 10) or print(f"step {s:>5} loss {l:.4f}"))

testset = evalkit.make_testset(10, seed=7, duration=2.0)
sweep = evalkit.nfe_sweep(res.model, testset, [1, 2, 5, 20], seed=0)
for n in (1, 2, 5, 20):
    print(f"NFE={n:>2}: SI-SDR {sweep.cell(n):6.2f} dB, improvement {sweep.improvement(n):+.2f} dB")
