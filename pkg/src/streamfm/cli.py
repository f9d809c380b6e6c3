"""``streamfm`` command line: train, enhance, stream, sweep, degrade, complexity, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every subcommand prints its effective configuration (YAML)
before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import backbones, config, degrade, dsp, evalkit, flow, stream, train
from .errors import ConfigError, DataError, NumericError, StreamFMError

log = logging.getLogger("streamfm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _echo(out, cfg: dict) -> None:
    out.write("# effective config\n" + config.dump_config(cfg))
    out.flush()


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _float_pair(text: str) -> tuple:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise ConfigError(f"expected one value or lo,hi; got {text!r}")
    return tuple(vals)


def cmd_train(args, out) -> int:
    raw = config.load_config(args.config) if args.config else {}
    raw = config.apply_overrides(raw, args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = train.TrainConfig.from_dict(raw)
    _echo(out, {"command": "train", "out": str(args.out), **cfg.to_dict()})
    out_dir = Path(args.out)
    model = optim = None
    ckpt = out_dir / "checkpoint.sfm"
    if args.resume and ckpt.exists():
        model, optim, _ = train.load_checkpoint(ckpt)
    every = max(1, cfg.steps // 20)

    def progress(step, loss):
        if step % every == 0:
            log.info("step %d loss %.5f", step, loss)

    res = train.train(cfg, out_dir, model, optim, progress)
    out.write(f"steps: {res.optim.step}\nfinal_loss: {res.losses[-1] if res.losses else float('nan')!r}\n")
    out.write(f"checkpoint: {ckpt}\nloss_csv: {out_dir / 'loss.csv'}\n")
    return 0


def _sampler(args) -> flow.SamplerConfig:
    return flow.SamplerConfig(args.nfe, args.scheme)


def cmd_enhance(args, out) -> int:
    sampler = _sampler(args)
    _echo(out, {"command": "enhance", "input": args.input, "output": args.output,
                "checkpoint": args.checkpoint, "nfe": sampler.nfe, "scheme": sampler.scheme,
                "seed": args.seed, "format": args.format})
    model = train.load_model(args.checkpoint)
    audio = dsp.read_wav(args.input)
    evals = []
    enhanced = flow.restore(audio, model, sampler, args.seed, on_eval=evals.append)
    dsp.write_wav(args.output, enhanced, args.format)
    record = {"input": args.input, "output": args.output, "samples": len(enhanced.samples),
              "nfe": sampler.nfe, "scheme": sampler.scheme, "seed": args.seed,
              "field_evaluations": len(evals), "eval_times": [float(t) for t in evals]}
    if args.log:
        Path(args.log).write_text(json.dumps(record, indent=1))
    out.write(f"field_evaluations: {len(evals)}\nsamples: {len(enhanced.samples)}\n")
    return 0


def _read_stream_input(args):
    if args.input == "-":
        raw = sys.stdin.buffer.read()
        return np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0, args.rate
    audio = dsp.read_wav(args.input)
    return audio.samples, audio.sample_rate


def cmd_stream(args, out) -> int:
    sampler = _sampler(args)
    stft_cfg = dsp.StftConfig(args.window, args.hop, max(args.window, args.fft or args.window),
                              sample_rate=args.rate)
    info = {"command": "stream", "input": args.input, "output": args.output,
            "checkpoint": args.checkpoint, "nfe": sampler.nfe, "scheme": sampler.scheme,
            "seed": args.seed, "chunk": args.chunk, "window_len": stft_cfg.window_len,
            "hop_len": stft_cfg.hop_len, "sample_rate": stft_cfg.sample_rate}
    # raw PCM on stdout must stay clean, so status text goes to stderr then
    text = sys.stderr if args.output == "-" else out
    _echo(text, info)
    model = train.load_model(args.checkpoint) if args.checkpoint else None
    if args.input is not None:
        if model is None:
            raise ConfigError("stream needs --checkpoint to process audio")
        if args.output is None:
            raise ConfigError("stream needs an output path (or '-')")
        x, rate = _read_stream_input(args)
        if rate != stft_cfg.sample_rate:
            raise DataError(f"input at {rate} Hz, stream configured for {stft_cfg.sample_rate} Hz")
        state = stream.open_stream(model, sampler, stft_cfg, args.seed)
        pieces = [stream.push_samples(state, x[i : i + args.chunk]) for i in range(0, len(x), args.chunk)]
        pieces.append(stream.flush(state))
        y = np.concatenate(pieces) if pieces else np.zeros(0)
        if args.output == "-":
            pcm = np.round(np.clip(y, -1.0, 32767 / 32768) * 32768).astype("<i2")
            sys.stdout.buffer.write(pcm.tobytes())
            sys.stdout.buffer.flush()
        else:
            dsp.write_wav(args.output, dsp.AudioBuffer(y, rate), args.format)
    if args.report:
        report = stream.measure_latency(stft_cfg, model, sampler, duration_s=args.bench_seconds)
        text.write("# latency report\n" + report.to_text() + "\n")
    return 0


def cmd_sweep(args, out) -> int:
    nfes = _int_list(args.nfe)
    schemes = [s for s in args.schemes.split(",") if s]
    snr = _float_pair(args.snr)
    kinds = [k for k in args.kinds.split(",") if k]
    _echo(out, {"command": "sweep", "checkpoint": args.checkpoint, "nfe": nfes, "schemes": schemes,
                "clips": args.clips, "snr_db": list(snr), "kinds": kinds, "max_ops": args.max_ops,
                "duration_s": args.duration, "seed": args.seed, "out": args.out, "jobs": args.jobs})
    for s in schemes:
        for n in nfes:
            flow.SamplerConfig(n, s)
    model = train.load_model(args.checkpoint)
    testset = evalkit.make_testset(args.clips, args.seed, args.duration, kinds, snr, args.max_ops)
    res = evalkit.nfe_sweep(model, testset, nfes, schemes, seed=args.seed,
                            backbone=Path(args.checkpoint).stem, jobs=args.jobs)
    summary = evalkit.aggregate(res.rows)
    for row in summary:
        row["input_si_sdr_db"] = float(np.mean([r["input_si_sdr_db"] for r in res.rows]))
        row["si_sdr_improvement_db"] = row["si_sdr_db"] - row["input_si_sdr_db"]
    evalkit.write_csv(args.out, summary)
    if args.clips_out:
        evalkit.write_csv(args.clips_out, res.rows)
    if args.timing_out:
        evalkit.write_csv(args.timing_out, res.timing)
    if args.breakdown:
        table = evalkit.breakdown_report(res, args.breakdown)
        if args.breakdown_out:
            evalkit.write_csv(args.breakdown_out, table)
        out.write(f"# breakdown by {args.breakdown}\n")
        for row in table:
            out.write(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()) + "\n")
    out.write("# summary\n")
    for row in summary:
        out.write(f"{row['scheme']} nfe={row['nfe']} si_sdr={row['si_sdr_db']:.3f} "
                  f"improvement={row['si_sdr_improvement_db']:.3f} lsd={row['lsd_db']:.3f}\n")
    return 0


def cmd_degrade(args, out) -> int:
    chain = degrade.load_chain(args.chain)
    if args.seed is not None:
        chain = degrade.DegradationChain(chain.specs, args.seed)
    prov_path = args.provenance or str(args.output) + ".provenance.yaml"
    _echo(out, {"command": "degrade", "input": args.input, "output": args.output, "chain": args.chain,
                "seed": chain.rng_seed, "provenance": prov_path})
    audio = dsp.read_wav(args.input)
    noisy, prov = degrade.compose_chain(audio, chain)
    dsp.write_wav(args.output, noisy, args.format)
    degrade.save_chain(prov_path, prov)
    out.write(f"operators: {len(prov)}\n")
    return 0


def cmd_complexity(args, out) -> int:
    if args.model_config:
        source = config.load_config(args.model_config)
        label = args.model_config
    else:
        source = args.preset
        label = args.preset
    _echo(out, {"command": "complexity", "model": label})
    model = backbones.build_model(source, materialize=False)
    rep = backbones.count_complexity(model)
    out.write(f"{'model':<24}{'params':>14}{'MACs/s':>14}{'RF (s)':>10}\n")
    out.write(f"{label:<24}{rep.params:>14,d}{rep.macs_per_second / 1e9:>13.3f}G{rep.receptive_field_seconds:>10.3f}\n")
    ref_name = backbones.PRESET_REFERENCE.get(label)
    if ref_name:
        p, m, r = backbones.REFERENCE_COMPLEXITY[ref_name]
        out.write(f"{'reference ' + ref_name:<24}{int(p):>14,d}{m / 1e9:>13.3f}G{r:>10.3f}\n")
        ratios = rep.compare((p, m, r))
        out.write(" ".join(f"{k}={v:.3f}" for k, v in ratios.items()) + "\n")
    return 0


def cmd_eval(args, out) -> int:
    _echo(out, {"command": "eval", "manifest": args.manifest, "out": args.out, "jobs": args.jobs})
    if not Path(args.manifest).exists():
        raise DataError(f"manifest not found: {args.manifest}")
    rows = evalkit.evaluate_manifest(args.manifest, jobs=args.jobs)
    evalkit.write_csv(args.out, rows)
    for m in evalkit.METRICS:
        vals = [r[m] for r in rows if m in r]
        if vals:
            out.write(f"{m}: {float(np.mean(vals)):.4f} (n={len(vals)})\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamfm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a backbone")
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    t.add_argument("--out", required=True, help="output directory (checkpoint.sfm, loss.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.sfm")
    t.set_defaults(fn=cmd_train)

    def sampler_args(q):
        q.add_argument("--nfe", type=int, default=5)
        q.add_argument("--scheme", choices=("euler", "midpoint"), default="euler")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--format", choices=("float32", "pcm16"), default="float32")

    e = sub.add_parser("enhance", help="offline enhancement of a WAV file")
    e.add_argument("input")
    e.add_argument("output")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--log", help="write a JSON record of the run (field evaluations, seed)")
    sampler_args(e)
    e.set_defaults(fn=cmd_enhance)

    s = sub.add_parser("stream", help="frame-synchronous streaming enhancement")
    s.add_argument("input", nargs="?", help="WAV path, or '-' for raw s16le PCM on stdin")
    s.add_argument("output", nargs="?", help="WAV path, or '-' for raw s16le PCM on stdout")
    s.add_argument("--checkpoint")
    s.add_argument("--chunk", type=int, default=160, help="samples per push")
    s.add_argument("--rate", type=int, default=16000)
    s.add_argument("--window", type=int, default=320)
    s.add_argument("--hop", type=int, default=160)
    s.add_argument("--fft", type=int)
    s.add_argument("--report", action="store_true", help="print a latency report")
    s.add_argument("--bench-seconds", type=float, default=10.0)
    sampler_args(s)
    s.set_defaults(fn=cmd_stream)

    w = sub.add_parser("sweep", help="NFE sweep on a generated test set")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--nfe", default="1,2,5,10,20")
    w.add_argument("--schemes", default="euler")
    w.add_argument("--clips", type=int, default=50)
    w.add_argument("--snr", default="5", help="SNR in dB, or lo,hi")
    w.add_argument("--kinds", default="additive_noise")
    w.add_argument("--max-ops", type=int, default=1)
    w.add_argument("--duration", type=float, default=2.0)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True, help="summary CSV, one row per (scheme, nfe)")
    w.add_argument("--clips-out", help="per-clip CSV")
    w.add_argument("--timing-out", help="real-time factor CSV")
    w.add_argument("--breakdown", choices=("input_quality_bin", "degradation_kind"))
    w.add_argument("--breakdown-out")
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("degrade", help="apply a degradation chain to a WAV file")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--chain", required=True, help="YAML chain or provenance file")
    d.add_argument("--seed", type=int)
    d.add_argument("--provenance", help="provenance path (default OUTPUT.provenance.yaml)")
    d.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    d.set_defaults(fn=cmd_degrade)

    c = sub.add_parser("complexity", help="parameter, MAC and receptive-field counts")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset")
    g.add_argument("--model-config")
    c.set_defaults(fn=cmd_complexity)

    v = sub.add_parser("eval", help="intrusive metrics for a manifest of files")
    v.add_argument("--manifest", required=True, help="CSV with clean,noisy,enhanced columns")
    v.add_argument("--out", required=True)
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(fn=cmd_eval)
    return p


EXIT_CODES = ((NumericError, 3), (DataError, 2), (ConfigError, 1))


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args, out)
    except StreamFMError as exc:
        sys.stderr.write(f"error: {exc}\n")
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                return code
        return 1
    except FloatingPointError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
