import csv
import io
import json

import numpy as np
import pytest
import yaml

from streamfm import cli, degrade, dsp

TRAIN_YAML = """\
steps: 100
batch_size: 2
segment_s: 0.2
learning_rate: 0.001
seed: 4
degradations: [additive_noise]
max_degradations: 1
model:
  kind: convglu
  encoder_channels: [8, 4]
  fourier_dim: 4
  time_dim: 6
"""


def run(*argv):
    buf = io.StringIO()
    code = cli.main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


def _loss_rows(path):
    with open(path) as fh:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in csv.DictReader(fh)]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "train.yaml").write_text(TRAIN_YAML)
    code, text = run("train", "--config", root / "train.yaml", "--out", root / "run")
    assert code == 0, text
    return root, text


@pytest.fixture(scope="module")
def noisy_wav(tmp_path_factory):
    path = tmp_path_factory.mktemp("wav") / "noisy.wav"
    # at the -25 dBFS working level, so enhance's level normalization is a no-op
    x = np.random.default_rng(0).standard_normal(4000)
    dsp.write_wav(path, dsp.rms_normalize(dsp.AudioBuffer(x, 16000), -25.0)[0])
    return path


class TestTrain:
    def test_outputs(self, trained):
        root, text = trained
        assert text.startswith("# effective config\n")
        echoed = yaml.safe_load(text.split("steps: 100\n")[0] + "steps: 100\n")
        assert echoed["learning_rate"] == 0.001 and echoed["command"] == "train"
        assert (root / "run" / "checkpoint.sfm").exists()
        rows = _loss_rows(root / "run" / "loss.csv")
        assert len(rows) == 100 and all(float(r["loss"]) >= 0 for r in rows)

    def test_same_seed_same_loss_csv(self, trained, tmp_path):
        root, _ = trained
        assert run("train", "--config", root / "train.yaml", "--set", "steps=30", "--out", tmp_path / "a")[0] == 0
        assert _loss_rows(tmp_path / "a" / "loss.csv") == _loss_rows(root / "run" / "loss.csv")[:30]

    def test_missing_config_names_path(self, tmp_path, capsys):
        code, _ = run("train", "--config", tmp_path / "nope.yaml", "--out", tmp_path)
        assert code == 1
        assert "nope.yaml" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert run("train", "--set", "learning_rat=1", "--out", tmp_path)[0] == 1


class TestEnhance:
    def test_length_log_and_determinism(self, trained, noisy_wav, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        outs = []
        for name in ("a", "b"):
            code, text = run("enhance", noisy_wav, tmp_path / f"{name}.wav", "--checkpoint", ckpt,
                             "--nfe", 3, "--seed", 7, "--log", tmp_path / f"{name}.json")
            assert code == 0, text
            outs.append((tmp_path / f"{name}.wav").read_bytes())
        assert outs[0] == outs[1]
        assert len(dsp.read_wav(tmp_path / "a.wav").samples) == 4000
        log = json.loads((tmp_path / "a.json").read_text())
        assert log["field_evaluations"] == 3 and log["nfe"] == 3 and log["seed"] == 7

    def test_midpoint_counts_two_per_step(self, trained, noisy_wav, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        code, text = run("enhance", noisy_wav, tmp_path / "m.wav", "--checkpoint", ckpt,
                         "--nfe", 4, "--scheme", "midpoint")
        assert code == 0 and "field_evaluations: 4" in text

    def test_bad_nfe(self, trained, noisy_wav, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        assert run("enhance", noisy_wav, tmp_path / "x.wav", "--checkpoint", ckpt, "--nfe", 0)[0] == 1

    def test_missing_input_is_data_error(self, trained, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        assert run("enhance", tmp_path / "none.wav", tmp_path / "x.wav", "--checkpoint", ckpt)[0] == 2


class TestStream:
    def test_report_20ms(self):
        code, text = run("stream", "--report", "--bench-seconds", 0.1)
        assert code == 0
        assert "algorithmic_latency_ms: 20.0" in text

    def test_stream_matches_enhance(self, trained, noisy_wav, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        run("enhance", noisy_wav, tmp_path / "off.wav", "--checkpoint", ckpt, "--nfe", 2, "--seed", 3)
        code, _ = run("stream", noisy_wav, tmp_path / "on.wav", "--checkpoint", ckpt, "--nfe", 2,
                      "--seed", 3, "--chunk", 37)
        assert code == 0
        np.testing.assert_allclose(dsp.read_wav(tmp_path / "on.wav").samples,
                                   dsp.read_wav(tmp_path / "off.wav").samples, atol=1e-6)

    def test_needs_checkpoint(self, noisy_wav, tmp_path):
        assert run("stream", noisy_wav, tmp_path / "y.wav")[0] == 1


class TestSweep:
    def test_csv(self, trained, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        code, text = run("sweep", "--checkpoint", ckpt, "--nfe", "1,2", "--clips", 3, "--duration", 0.3,
                         "--out", tmp_path / "s.csv", "--clips-out", tmp_path / "c.csv",
                         "--breakdown", "input_quality_bin", "--breakdown-out", tmp_path / "b.csv")
        assert code == 0, text
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["nfe"]) for r in rows] == [1, 2]
        assert "si_sdr_improvement_db" in rows[0]
        with open(tmp_path / "c.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 6
        assert (tmp_path / "b.csv").exists()

    def test_bad_list(self, trained, tmp_path):
        ckpt = trained[0] / "run" / "checkpoint.sfm"
        assert run("sweep", "--checkpoint", ckpt, "--nfe", "one", "--out", tmp_path / "s.csv")[0] == 1


class TestDegrade:
    def test_writes_wav_and_provenance(self, noisy_wav, tmp_path):
        chain = degrade.DegradationChain([degrade.DegradationSpec("clip", {"mode": "hard", "threshold": 0.01})], 5)
        degrade.save_chain(tmp_path / "chain.yaml", chain)
        code, text = run("degrade", noisy_wav, tmp_path / "d.wav", "--chain", tmp_path / "chain.yaml")
        assert code == 0, text
        y = dsp.read_wav(tmp_path / "d.wav").samples
        assert np.max(np.abs(y)) <= 0.01 + 1e-7
        prov = degrade.load_chain(str(tmp_path / "d.wav") + ".provenance.yaml")
        assert prov.specs[0].kind == "clip"

    def test_missing_chain(self, noisy_wav, tmp_path):
        assert run("degrade", noisy_wav, tmp_path / "d.wav", "--chain", tmp_path / "none.yaml")[0] == 1


class TestComplexity:
    def test_preset_table(self):
        code, text = run("complexity", "--preset", "convglu-large")
        assert code == 0
        assert "reference ConvGLU-UNet-large" in text and "params_ratio=" in text

    def test_unknown_preset(self):
        assert run("complexity", "--preset", "bogus")[0] == 1


class TestEval:
    def test_manifest(self, noisy_wav, tmp_path):
        (tmp_path / "m.csv").write_text(f"clean,enhanced\n{noisy_wav},{noisy_wav}\n")
        code, text = run("eval", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "r.csv")
        assert code == 0 and "si_sdr_db: 60.0000" in text

    def test_missing_manifest(self, tmp_path):
        assert run("eval", "--manifest", tmp_path / "none.csv", "--out", tmp_path / "r.csv")[0] == 2


def test_usage_error_exit_code():
    assert run("no-such-command")[0] == 1
    assert run()[0] == 1
