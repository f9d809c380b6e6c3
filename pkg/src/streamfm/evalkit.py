"""Intrusive metrics, NFE sweeps and improvement breakdowns.

Test sets are synthetic: every clip carries its clean reference and the
provenance of the degradation chain that produced the noisy input, so
per-degradation reports use exact labels.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import degrade, dsp, flow, sources
from .errors import ConfigError, DataError

__all__ = [
    "si_sdr",
    "lsd",
    "spectral_convergence",
    "clip_metrics",
    "TestClip",
    "make_testset",
    "SweepResult",
    "clip_seed",
    "nfe_sweep",
    "breakdown_report",
    "aggregate",
    "write_csv",
    "read_csv",
    "evaluate_manifest",
]

SI_SDR_CAP = 60.0
METRICS = ("si_sdr_db", "lsd_db", "spectral_convergence")


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +60 dB."""
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if ref.shape != est.shape:
        raise ConfigError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DataError("zero reference signal")
    target = (np.dot(est, ref) / ref_energy) * ref
    err = est - target
    num, den = float(np.dot(target, target)), float(np.dot(err, err))
    if den == 0.0 or num / den > 10 ** (SI_SDR_CAP / 10):
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return float(10 * np.log10(num / den))


def lsd(reference_spec, estimate_spec, floor: float = 1e-8) -> float:
    """Log-spectral distance in dB.

    Per frame, RMS over bins of ``20 * log10(|ref| / |est|)``; then RMS over
    frames.
    """
    a = np.abs(np.asarray(reference_spec))
    b = np.abs(np.asarray(estimate_spec))
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = 20.0 * (np.log10(np.maximum(a, floor)) - np.log10(np.maximum(b, floor)))
    per_frame = np.mean(d * d, axis=0)
    return float(np.sqrt(np.mean(per_frame)))


def spectral_convergence(reference_spec, estimate_spec) -> float:
    a = np.abs(np.asarray(reference_spec))
    b = np.abs(np.asarray(estimate_spec))
    den = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / den) if den > 0 else 0.0


def clip_metrics(clean, estimate, stft_cfg=dsp.DEFAULT_STFT) -> dict:
    ref = dsp.stft(clean, stft_cfg)
    est = dsp.stft(estimate, stft_cfg)
    return {
        "si_sdr_db": si_sdr(clean, estimate),
        "lsd_db": lsd(ref, est),
        "spectral_convergence": spectral_convergence(ref, est),
    }


@dataclass
class TestClip:
    clip_id: int
    clean: np.ndarray
    noisy: np.ndarray
    provenance: list
    seed: int

    @property
    def kinds(self) -> str:
        return "+".join(p["kind"] for p in self.provenance) or "none"


def make_testset(n_clips: int, seed: int, duration: float = 2.0, kinds=("additive_noise",),
                 snr_db=(5.0, 5.0), max_ops: int = 1, target_dbfs: float = -25.0,
                 pool_seed: int = 10_000, noise_source=None):
    """Held-out synthetic clips with exact provenance.

    ``pool_seed`` selects a pseudo-speech pool disjoint from training pools.
    Both clean and noisy are normalized to ``target_dbfs``.
    """
    speech = sources.PseudoSpeechSource(pool_seed, pool_size=max(8, n_clips), clip_seconds=max(duration, 4.0))
    ranges = dict(degrade.DEFAULT_RANGES)
    ranges["additive_noise"] = {"snr_db": list(snr_db) if snr_db[0] != snr_db[1] else float(snr_db[0])}
    clips = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        clean, _ = dsp.rms_normalize(speech.draw(duration, rng), target_dbfs)
        chain = degrade.sample_chain(rng, kinds, max_ops, ranges)
        noisy, prov = degrade.compose_chain(clean, chain, noise_source)
        noisy, _ = dsp.rms_normalize(noisy, target_dbfs)
        clips.append(TestClip(i, clean, noisy, prov, int(rng.integers(2**31))))
    return clips


@dataclass
class SweepResult:
    """Per-clip rows for every (backbone, scheme, nfe) cell."""

    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)

    def cell(self, nfe, metric="si_sdr_db", scheme=None, backbone=None):
        vals = [
            r[metric] for r in self.rows
            if r["nfe"] == nfe and (scheme is None or r["scheme"] == scheme)
            and (backbone is None or r["backbone"] == backbone)
        ]
        return float(np.mean(vals)) if vals else float("nan")

    def improvement(self, nfe, metric="si_sdr_db", scheme=None):
        rows = [r for r in self.rows if r["nfe"] == nfe and (scheme is None or r["scheme"] == scheme)]
        return float(np.mean([r[metric] - r["input_" + metric] for r in rows]))


def clip_seed(seed: int, clip_id: int) -> int:
    """Base-noise seed of one clip; independent of NFE and scheme."""
    return int(np.random.SeedSequence([seed, clip_id]).generate_state(1)[0])


def _enhance_clip(args):
    model, clip, cfg, cseed, flow_params, stft_cfg, compression = args
    t0 = time.perf_counter()
    est = flow.enhance_samples(clip.noisy, model, cfg, cseed, flow_params, stft_cfg, compression)
    elapsed = time.perf_counter() - t0
    return clip_metrics(clip.clean, est, stft_cfg), elapsed


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def nfe_sweep(model, testset, nfe_list, schemes=("euler",), seed: int = 0, backbone: str = "model",
              flow_params=flow.DEFAULT_FLOW, stft_cfg=dsp.DEFAULT_STFT,
              compression=dsp.DEFAULT_COMPRESSION, jobs: int = 1) -> SweepResult:
    """Enhance every clip at every NFE with the same per-clip base-noise seed.

    Clip ``i`` always uses :func:`clip_seed` ``(seed, i)`` regardless of NFE
    or scheme, so comparisons across NFE are paired. ``jobs > 1`` spreads
    clips over worker processes; results do not depend on ``jobs``.
    """
    result = SweepResult()
    inputs = {c.clip_id: clip_metrics(c.clean, c.noisy, stft_cfg) for c in testset}
    for scheme in schemes:
        for nfe in nfe_list:
            cfg = flow.SamplerConfig(int(nfe), scheme)
            work = [(model, c, cfg, clip_seed(seed, c.clip_id), flow_params, stft_cfg, compression)
                    for c in testset]
            elapsed, audio_s = 0.0, 0.0
            for clip, (metrics, dt) in zip(testset, _map(_enhance_clip, work, jobs)):
                elapsed += dt
                audio_s += len(clip.noisy) / stft_cfg.sample_rate
                row = {"backbone": backbone, "scheme": scheme, "nfe": int(nfe), "clip": clip.clip_id,
                       "seed": clip_seed(seed, clip.clip_id), "kinds": clip.kinds}
                row.update(metrics)
                row.update({"input_" + k: v for k, v in inputs[clip.clip_id].items()})
                result.rows.append(row)
            result.timing.append({"backbone": backbone, "scheme": scheme, "nfe": int(nfe),
                                  "rtf": elapsed / audio_s if audio_s else float("nan")})
    return result


def aggregate(rows, keys=("backbone", "scheme", "nfe"), metrics=METRICS) -> list:
    """Mean of each metric per key tuple, with clip counts; order-independent."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        row = dict(zip(keys, key))
        row["clips"] = len(members)
        for m in metrics:
            row[m] = float(np.mean(sorted(r[m] for r in members)))
        out.append(row)
    return out


def breakdown_report(sweep: SweepResult, axis: str = "input_quality_bin", metric: str = "si_sdr_db",
                     n_bins: int = 4, sort_by: tuple | None = None) -> list:
    """Mean improvement (enhanced minus input) per (bucket, nfe).

    ``input_quality_bin`` buckets clips by quantiles of the input metric
    (bucket 0 = worst input); ``degradation_kind`` buckets by provenance.
    Rows are sorted by descending improvement at the largest NFE, or by the
    difference between two NFE columns when ``sort_by=(nfe_a, nfe_b)``.
    """
    rows = sweep.rows
    if not rows:
        return []
    if axis == "degradation_kind":
        if any(r.get("kinds") in (None, "") for r in rows):
            raise DataError("sweep rows lack degradation provenance")
        bucket_of = {id(r): r["kinds"] for r in rows}
    elif axis == "input_quality_bin":
        by_clip = {}
        for r in rows:
            by_clip.setdefault(r["clip"], r["input_" + metric])
        clips = sorted(by_clip)
        if n_bins == 1:
            labels = [0] * len(clips)
        else:
            edges = np.quantile([by_clip[c] for c in clips], np.linspace(0, 1, n_bins + 1)[1:-1])
            labels = [int(np.searchsorted(edges, by_clip[c], side="right")) for c in clips]
        label = dict(zip(clips, labels))
        bucket_of = {id(r): label[r["clip"]] for r in rows}
    else:
        raise ConfigError(f"unknown breakdown axis {axis!r}")
    nfes = sorted({r["nfe"] for r in rows})
    table = {}
    for r in rows:
        table.setdefault(bucket_of[id(r)], {}).setdefault(r["nfe"], []).append(r[metric] - r["input_" + metric])
    out = []
    for bucket, cols in table.items():
        row = {"bucket": bucket}
        for nfe in nfes:
            vals = cols.get(nfe, [])
            row[f"nfe{nfe}"] = float(np.mean(vals)) if vals else float("nan")
            row[f"n{nfe}"] = len(vals)
        out.append(row)
    if sort_by is not None:
        a, b = sort_by
        out.sort(key=lambda r: r[f"nfe{a}"] - r[f"nfe{b}"], reverse=True)
    elif axis == "degradation_kind":
        out.sort(key=lambda r: r[f"nfe{nfes[-1]}"], reverse=True)
    else:
        out.sort(key=lambda r: r["bucket"])
    return out


def write_csv(path, rows, header=None) -> None:
    """Rows of dicts to CSV; floats written with ``repr`` (round-trip exact)."""
    rows = list(rows)
    header = header or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


MANIFEST_HEADER = ("clean", "noisy", "enhanced")


def _manifest_row(args):
    entry, stft_cfg = args
    sr = stft_cfg.sample_rate
    clean = dsp.read_wav(entry["clean"], sr).samples
    row = {"clip": entry["clip"]}
    for role in ("noisy", "enhanced"):
        if not entry.get(role):
            continue
        est = dsp.read_wav(entry[role], sr).samples
        if len(est) != len(clean):
            raise DataError(f"{entry[role]}: {len(est)} samples, reference has {len(clean)}")
        prefix = "input_" if role == "noisy" else ""
        row.update({prefix + k: v for k, v in clip_metrics(clean, est, stft_cfg).items()})
    return row


def evaluate_manifest(path, stft_cfg=dsp.DEFAULT_STFT, jobs: int = 1) -> list:
    """Per-clip metrics for a CSV manifest with columns ``clean,noisy,enhanced``.

    Relative paths resolve against the manifest's directory. An optional
    ``kinds`` column is carried through for per-degradation reports.
    """
    from pathlib import Path

    base = Path(path).parent
    entries = read_csv(path)
    if not entries or "clean" not in entries[0]:
        raise DataError(f"{path}: manifest needs a header with at least a 'clean' column")
    work = []
    for i, e in enumerate(entries):
        e = {k: (str(base / v) if k in MANIFEST_HEADER and v else v) for k, v in e.items()}
        e["clip"] = i
        work.append((e, stft_cfg))
    rows = _map(_manifest_row, work, jobs)
    for e, r in zip(entries, rows):
        if e.get("kinds"):
            r["kinds"] = e["kinds"]
    return rows
