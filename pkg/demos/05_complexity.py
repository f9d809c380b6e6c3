"""Parameter, MAC and receptive-field counts for the presets."""

from streamfm import backbones

for name in backbones.PRESETS:
    rep = backbones.count_complexity(backbones.build_model(name, materialize=False))
    line = (f"{name:<16} {rep.params / 1e6:8.2f} M params {rep.macs_per_second / 1e9:8.3f} G MACs/s "
            f"RF {rep.receptive_field_seconds:.3f} s")
    ref = backbones.PRESET_REFERENCE.get(name)
    if ref:
        r = rep.compare(backbones.REFERENCE_COMPLEXITY[ref])
        line += f"   vs {ref}: " + " ".join(f"{k}={v:.2f}" for k, v in r.items())
    print(line)
