import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamfm import dsp, evalkit, flow
from streamfm.errors import ConfigError, DataError


class _Oracle:
    """Field whose clean estimate is ``gain * cond``: a fixed Wiener-style gain."""

    causal = True

    def __init__(self, gain=0.7):
        self.gain = gain

    def velocity(self, x, cond, t, cache=None):
        p = flow.DEFAULT_FLOW
        st_ = p.sigma(t)
        c1 = (p.sigma_min - p.sigma_max) / st_
        return c1 * x + (1 - t * c1) * self.gain * cond


@pytest.fixture(scope="module")
def testset():
    return evalkit.make_testset(6, seed=3, duration=0.5, snr_db=(-5, 15))


class TestSiSdr:
    x = np.random.default_rng(0).standard_normal(1000)

    def test_identity_and_scale(self):
        assert evalkit.si_sdr(self.x, self.x) == 60.0
        assert evalkit.si_sdr(self.x, 2 * self.x) == 60.0

    def test_orthogonal_noise_zero_db(self):
        n = np.random.default_rng(1).standard_normal(1000)
        n -= (n @ self.x) / (self.x @ self.x) * self.x
        n *= np.linalg.norm(self.x) / np.linalg.norm(n)
        assert evalkit.si_sdr(self.x, self.x + n) == pytest.approx(0.0, abs=0.1)

    def test_known_ratio(self):
        n = np.random.default_rng(2).standard_normal(1000)
        n -= (n @ self.x) / (self.x @ self.x) * self.x
        n *= 0.1 * np.linalg.norm(self.x) / np.linalg.norm(n)
        assert evalkit.si_sdr(self.x, self.x + n) == pytest.approx(20.0, abs=1e-9)

    @given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, alpha, seed):
        rng = np.random.default_rng(seed)
        ref, est = rng.standard_normal(64), rng.standard_normal(64)
        assert evalkit.si_sdr(ref, alpha * est) == pytest.approx(evalkit.si_sdr(ref, est), abs=1e-9)

    def test_errors(self):
        with pytest.raises(DataError):
            evalkit.si_sdr(np.zeros(5), np.ones(5))
        with pytest.raises(ConfigError):
            evalkit.si_sdr(np.ones(5), np.ones(4))


class TestSpectralMetrics:
    S = np.random.default_rng(3).standard_normal((161, 20)) + 1j * np.random.default_rng(4).standard_normal((161, 20))

    def test_lsd(self):
        assert evalkit.lsd(self.S, self.S) == 0.0
        assert evalkit.lsd(self.S, 10 * self.S) == pytest.approx(20.0, abs=1e-12)
        other = self.S[::-1]
        assert evalkit.lsd(self.S, other) == evalkit.lsd(other, self.S)
        with pytest.raises(ConfigError):
            evalkit.lsd(self.S, self.S[:, :3])

    def test_lsd_oracle(self):
        a, b = np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([[10.0, 1.0], [1.0, 1.0]])
        # frame 0: bins differ by 20 dB and 0 dB -> mean square 200; frame 1: 0 -> RMS sqrt(100)
        assert evalkit.lsd(a, b) == pytest.approx(10.0)

    def test_spectral_convergence(self):
        assert evalkit.spectral_convergence(self.S, self.S) == 0.0
        assert evalkit.spectral_convergence(self.S, 2 * self.S) == pytest.approx(1.0)


class TestTestset:
    def test_provenance_and_level(self, testset):
        assert len(testset) == 6
        for c in testset:
            assert c.kinds == "additive_noise"
            assert len(c.clean) == len(c.noisy) == 8000
            assert dsp.rms(c.clean) == pytest.approx(10 ** (-25 / 20), rel=1e-6)

    def test_deterministic(self, testset):
        again = evalkit.make_testset(6, seed=3, duration=0.5, snr_db=(-5, 15))
        for a, b in zip(testset, again):
            np.testing.assert_array_equal(a.noisy, b.noisy)
            assert a.provenance == b.provenance

    def test_fixed_snr(self):
        clip = evalkit.make_testset(1, seed=0, duration=0.5)[0]
        assert clip.provenance[0]["params"]["snr_db"] == 5.0


@pytest.fixture(scope="module")
def sweep(testset):
    return evalkit.nfe_sweep(_Oracle(), testset, [1, 3], seed=5)


@pytest.fixture(scope="module")
def sweep12(testset):
    return evalkit.nfe_sweep(_Oracle(0.8), testset, [1, 2], seed=1)


class TestSweep:
    def test_shape(self, sweep, testset):
        assert len(sweep.rows) == 2 * len(testset)
        assert {t["nfe"] for t in sweep.timing} == {1, 3}

    def test_single_column(self, testset):
        res = evalkit.nfe_sweep(_Oracle(), testset[:2], [1])
        assert {r["nfe"] for r in res.rows} == {1}

    def test_paired_seeds(self, sweep):
        seeds = {}
        for r in sweep.rows:
            seeds.setdefault(r["clip"], set()).add(r["seed"])
        assert all(len(s) == 1 for s in seeds.values())
        assert len({next(iter(s)) for s in seeds.values()}) == len(seeds)

    def test_reproducible(self, sweep, testset):
        again = evalkit.nfe_sweep(_Oracle(), testset, [1, 3], seed=5)
        assert again.rows == sweep.rows

    def test_jobs_do_not_change_results(self, sweep, testset):
        par = evalkit.nfe_sweep(_Oracle(), testset, [1, 3], seed=5, jobs=2)
        assert par.rows == sweep.rows

    def test_exact_field_is_nfe_independent(self, sweep):
        # the oracle field is exact for its own Gaussian path, so every NFE lands on the same point
        assert sweep.cell(1) == pytest.approx(sweep.cell(3), abs=1e-6)

    def test_aggregate_matches_rows(self, sweep):
        agg = evalkit.aggregate(sweep.rows)
        for row in agg:
            members = [r for r in sweep.rows if r["nfe"] == row["nfe"]]
            assert row["clips"] == len(members)
            for m in evalkit.METRICS:
                assert abs(row[m] - np.mean([r[m] for r in members])) <= 1e-12

    def test_aggregate_shuffle_invariant(self, sweep):
        rows = list(sweep.rows)
        base = evalkit.aggregate(rows)
        for k in range(5):
            random.Random(k).shuffle(rows)
            assert evalkit.aggregate(rows) == base

    def test_csv_round_trip(self, sweep, tmp_path):
        evalkit.write_csv(tmp_path / "s.csv", sweep.rows)
        back = evalkit.read_csv(tmp_path / "s.csv")
        assert [float(r["si_sdr_db"]) for r in back] == [r["si_sdr_db"] for r in sweep.rows]


class TestBreakdown:
    def test_single_bucket_equals_mean(self, sweep12):
        (row,) = evalkit.breakdown_report(sweep12, n_bins=1)
        assert row["nfe2"] == pytest.approx(sweep12.improvement(2), abs=1e-12)
        assert row["n2"] == 6

    def test_quartiles(self, sweep12):
        rows = evalkit.breakdown_report(sweep12, n_bins=2)
        assert [r["bucket"] for r in rows] == [0, 1]
        assert sum(r["n1"] for r in rows) == 6
        inputs = {r["clip"]: r["input_si_sdr_db"] for r in sweep12.rows}
        worst = sorted(inputs, key=inputs.get)[:3]
        vals = [r["si_sdr_db"] - r["input_si_sdr_db"] for r in sweep12.rows if r["nfe"] == 1 and r["clip"] in worst]
        assert rows[0]["nfe1"] == pytest.approx(np.mean(vals))

    def test_antisymmetry(self, sweep12):
        swapped = evalkit.SweepResult([
            {**r, "si_sdr_db": r["input_si_sdr_db"], "input_si_sdr_db": r["si_sdr_db"]} for r in sweep12.rows
        ])
        a = evalkit.breakdown_report(sweep12, n_bins=1)[0]
        b = evalkit.breakdown_report(swapped, n_bins=1)[0]
        assert a["nfe1"] == pytest.approx(-b["nfe1"], abs=1e-12)

    def test_degradation_kind_sorted(self):
        rows = [{"clip": i, "nfe": 1, "kinds": k, "si_sdr_db": v, "input_si_sdr_db": 0.0}
                for i, (k, v) in enumerate([("a", 1.0), ("b", 3.0), ("c", 2.0), ("b", 5.0)])]
        out = evalkit.breakdown_report(evalkit.SweepResult(rows), axis="degradation_kind")
        assert [r["bucket"] for r in out] == ["b", "c", "a"]
        assert out[0]["nfe1"] == 4.0

    def test_missing_provenance(self):
        rows = [{"clip": 0, "nfe": 1, "kinds": "", "si_sdr_db": 1.0, "input_si_sdr_db": 0.0}]
        with pytest.raises(DataError):
            evalkit.breakdown_report(evalkit.SweepResult(rows), axis="degradation_kind")

    def test_unknown_axis(self, sweep12):
        with pytest.raises(ConfigError):
            evalkit.breakdown_report(sweep12, axis="speaker")


class TestManifest:
    def test_evaluate(self, tmp_path, testset):
        c = testset[0]
        for name, x in (("clean", c.clean), ("noisy", c.noisy), ("enh", c.clean)):
            dsp.write_wav(tmp_path / f"{name}.wav", dsp.AudioBuffer(x, 16000))
        (tmp_path / "m.csv").write_text("clean,noisy,enhanced,kinds\nclean.wav,noisy.wav,enh.wav,additive_noise\n")
        (row,) = evalkit.evaluate_manifest(tmp_path / "m.csv")
        assert row["si_sdr_db"] == 60.0 and row["kinds"] == "additive_noise"
        assert row["input_si_sdr_db"] == pytest.approx(evalkit.si_sdr(c.clean, c.noisy.astype(np.float32)), abs=1e-3)

    def test_length_mismatch(self, tmp_path):
        dsp.write_wav(tmp_path / "a.wav", dsp.AudioBuffer(np.ones(100) * 0.1, 16000))
        dsp.write_wav(tmp_path / "b.wav", dsp.AudioBuffer(np.ones(90) * 0.1, 16000))
        (tmp_path / "m.csv").write_text("clean,enhanced\na.wav,b.wav\n")
        with pytest.raises(DataError):
            evalkit.evaluate_manifest(tmp_path / "m.csv")
