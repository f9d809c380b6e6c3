import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from streamfm import degrade, dsp, sources
from streamfm.degrade import DegradationChain, DegradationSpec
from streamfm.errors import ConfigError, SilentInputError

SR = 16000


def _tone(freq, n=SR, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def _steady_gain_db(x, y):
    sl = slice(len(x) // 2, None)  # past the filter transient
    return 20 * np.log10(dsp.rms(y[sl]) / dsp.rms(x[sl]))


class TestNoise:
    def test_inf_snr_identity(self):
        x = np.random.default_rng(0).standard_normal(100)
        np.testing.assert_array_equal(degrade.apply_noise(x, np.ones(100), np.inf), x)

    def test_equal_rms_zero_db(self):
        rng = np.random.default_rng(1)
        x, n = rng.standard_normal(4000), rng.standard_normal(4000)
        n *= dsp.rms(x) / dsp.rms(n)
        assert degrade.noise_gain(x, n, 0.0) == pytest.approx(1.0, abs=1e-3)

    def test_twenty_db_gain(self):
        rng = np.random.default_rng(2)
        x, n = rng.standard_normal(4000), rng.standard_normal(4000)
        x /= dsp.rms(x)
        n /= dsp.rms(n)
        assert degrade.noise_gain(x, n, 20.0) == pytest.approx(0.1, rel=1e-12)

    @given(snr=st.floats(-10, 40), seed=st.integers(0, 2**32 - 1), n_noise=st.integers(50, 400))
    @settings(max_examples=60, deadline=None)
    def test_achieved_snr(self, snr, seed, n_noise):
        rng = np.random.default_rng(seed)
        x, n = rng.standard_normal(200), rng.standard_normal(n_noise)
        y = degrade.apply_noise(x, n, snr)
        achieved = 10 * np.log10(np.mean(x**2) / np.mean((y - x) ** 2))
        assert abs(achieved - snr) < 0.1

    def test_silent_noise(self):
        with pytest.raises(SilentInputError):
            degrade.apply_noise(np.ones(10), np.zeros(10), 5.0)

    def test_buffer_round_trip(self):
        out = degrade.apply_noise(dsp.AudioBuffer(np.ones(10), SR), np.ones(3), 10.0)
        assert isinstance(out, dsp.AudioBuffer) and len(out) == 10


class TestReverb:
    def test_tiny_t60_identity(self):
        x = np.random.default_rng(3).standard_normal(500)
        np.testing.assert_array_equal(degrade.apply_reverb(x, 1e-5, seed=1), x)

    def test_envelope_at_t60(self):
        # exp(-6.908) is 10**-3 to within 0.03 %, i.e. -60 dB in amplitude
        assert 20 * np.log10(np.exp(-6.908)) == pytest.approx(-60.0, abs=0.01)
        rir = degrade.synthetic_rir(0.5, seed=4)
        assert rir[0] == 1.0 and len(rir) == 8000
        # fit the log envelope of the tail in blocks
        tail = rir[1:]
        blocks = tail[: 7936].reshape(62, 128)
        level = 10 * np.log10(np.mean(blocks**2, axis=1))
        times = (np.arange(62) * 128 + 64) / SR
        slope = np.polyfit(times, level, 1)[0]
        assert slope * 0.5 == pytest.approx(-60.0, abs=6.0)

    def test_impulse_gives_rir(self):
        x = np.zeros(12000)
        x[0] = 1.0
        rir = degrade.synthetic_rir(0.3, seed=5, drr_db=3.0)
        np.testing.assert_allclose(degrade.apply_reverb(x, 0.3, seed=5, drr_db=3.0)[: len(rir)], rir, atol=1e-12)

    def test_drr(self):
        rir = degrade.synthetic_rir(0.4, seed=6, drr_db=6.0)
        assert 10 * np.log10(1.0 / np.sum(rir[1:] ** 2)) == pytest.approx(6.0, abs=1e-9)

    def test_length_kept(self):
        assert len(degrade.apply_reverb(np.ones(100), 0.5, 0)) == 100

    def test_bad_t60(self):
        with pytest.raises(ConfigError):
            degrade.synthetic_rir(0.0, 0)


class TestBandlimit:
    def test_passband(self):
        x = _tone(1000)
        assert abs(_steady_gain_db(x, degrade.apply_bandlimit(x, 4000, 8))) < 0.5

    def test_stopband(self):
        x = _tone(7000)
        assert _steady_gain_db(x, degrade.apply_bandlimit(x, 4000, 8)) < -30

    def test_highpass_mirror(self):
        lo, hi = _tone(1000), _tone(7000)
        assert _steady_gain_db(lo, degrade.apply_bandlimit(lo, 4000, 8, "highpass")) < -30
        assert abs(_steady_gain_db(hi, degrade.apply_bandlimit(hi, 4000, 8, "highpass"))) < 0.5

    @pytest.mark.parametrize("order", [2, 4, 8])
    def test_minus_3db_at_cutoff(self, order):
        sos = degrade.bandlimit_sos(3000, order, "lowpass", SR)
        _, h = signal.sosfreqz(sos, worN=[3000.0], fs=SR)
        assert 20 * np.log10(abs(h[0])) == pytest.approx(-3.0103, abs=0.5)
        # Butterworth magnitude 1/sqrt(1 + (w/wc)^(2n)) holds for the bilinear-warped frequency
        assert sos.shape == (-(-order // 2), 6)

    def test_bandpass(self):
        x = _tone(2000) + _tone(6500)
        y = degrade.apply_bandlimit(x, [1000, 3000], 6, "bandpass")
        spec = np.abs(np.fft.rfft(y[SR // 2 :]))
        f = np.fft.rfftfreq(SR // 2, 1 / SR)
        assert spec[np.argmin(abs(f - 2000))] > 100 * spec[np.argmin(abs(f - 6500))]

    def test_errors(self):
        for cut in (0, 8000, 9000):
            with pytest.raises(ConfigError):
                degrade.apply_bandlimit(np.ones(10), cut)
        with pytest.raises(ConfigError):
            degrade.apply_bandlimit(np.ones(10), 1000, type="notch")
        with pytest.raises(ConfigError):
            degrade.apply_bandlimit(np.ones(10), 1000, type="bandpass")


class TestClip:
    def test_identity_above_peak(self):
        x = np.random.default_rng(7).uniform(-0.5, 0.5, 100)
        np.testing.assert_array_equal(degrade.apply_clip(x, 0.5), x)

    def test_hard_value(self):
        assert degrade.apply_clip(np.array([0.6, -0.6]), 0.3).tolist() == [0.3, -0.3]

    def test_soft_slope(self):
        h, th = 1e-6, 0.2
        slope = (degrade.apply_clip(np.array([h]), th, "soft") - degrade.apply_clip(np.array([-h]), th, "soft")) / (2 * h)
        assert float(slope[0]) == pytest.approx(1.0, abs=1e-9)

    @given(th=st.floats(0.01, 2.0), seed=st.integers(0, 1000), mode=st.sampled_from(["hard", "soft"]))
    @settings(max_examples=50, deadline=None)
    def test_peak_bound(self, th, seed, mode):
        x = np.random.default_rng(seed).standard_normal(100) * 3
        assert np.max(np.abs(degrade.apply_clip(x, th, mode))) <= th

    def test_errors(self):
        with pytest.raises(ConfigError):
            degrade.apply_clip(np.ones(3), 0.0)
        with pytest.raises(ConfigError):
            degrade.apply_clip(np.ones(3), 0.5, "medium")


class TestCodec:
    def test_near_transparent(self):
        x = np.random.default_rng(8).uniform(-1, 1, 5000)
        assert np.max(np.abs(degrade.apply_codec_proxy(x, 16, 1) - x)) < 1e-3

    def test_hold(self):
        x = np.random.default_rng(9).uniform(-1, 1, 101)
        y = degrade.apply_codec_proxy(x, 8, 2)
        assert len(y) == 101
        np.testing.assert_array_equal(y[0:100:2], y[1:101:2])

    @given(bits=st.integers(4, 16), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_idempotent(self, bits, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 200)
        once = degrade.apply_codec_proxy(x, bits, 1)
        np.testing.assert_allclose(degrade.apply_codec_proxy(once, bits, 1), once, atol=1e-12)

    def test_errors(self):
        for bits, dec in ((3, 1), (17, 1), (8, 3), (8.5, 1)):
            with pytest.raises(ConfigError):
                degrade.apply_codec_proxy(np.zeros(4), bits, dec)


class TestTfMask:
    SPEC = np.random.default_rng(10).standard_normal((161, 50)) + 1j

    def test_zero_patches_identity(self):
        np.testing.assert_array_equal(degrade.apply_tf_mask(self.SPEC, 0, 10, 5), self.SPEC)

    @given(count=st.integers(0, 8), mf=st.integers(1, 40), ml=st.integers(1, 20), seed=st.integers(0, 10**6))
    @settings(max_examples=60, deadline=None)
    def test_count_bound_and_others_untouched(self, count, mf, ml, seed):
        out = degrade.apply_tf_mask(self.SPEC, count, mf, ml, seed)
        zeroed = out == 0
        assert zeroed.sum() <= count * mf * ml
        np.testing.assert_array_equal(out[~zeroed], self.SPEC[~zeroed])
        mask = np.zeros(self.SPEC.shape, bool)
        for f0, l0, nf, nl in degrade.sample_tf_patches(self.SPEC.shape, count, mf, ml, seed):
            mask[f0 : f0 + nf, l0 : l0 + nl] = True
        np.testing.assert_array_equal(zeroed, mask)

    def test_determinism(self):
        a = degrade.apply_tf_mask(self.SPEC, 4, 20, 5, seed=3)
        np.testing.assert_array_equal(a, degrade.apply_tf_mask(self.SPEC, 4, 20, 5, seed=3))
        assert not np.array_equal(a, degrade.apply_tf_mask(self.SPEC, 4, 20, 5, seed=4))

    def test_full_band_packet_loss(self):
        out = degrade.apply_tf_mask(self.SPEC, 2, 1, 4, seed=1, full_band=True)
        cols = np.flatnonzero(np.all(out == 0, axis=0))
        assert len(cols) >= 1 and not np.any(out[:, np.setdiff1d(np.arange(50), cols)] == 0)

    def test_oversized_patch(self):
        with pytest.raises(ConfigError):
            degrade.apply_tf_mask(self.SPEC, 1, 200, 5)


class TestChain:
    X = sources.pseudo_speech(1.0, seed=1) * 0.1

    def test_empty(self):
        y, prov = degrade.compose_chain(self.X, DegradationChain())
        np.testing.assert_array_equal(y, self.X)
        assert prov == []

    def test_replay_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        for _ in range(10):
            chain = degrade.sample_chain(rng, max_ops=4)
            y, prov = degrade.compose_chain(self.X, chain)
            path = tmp_path / "p.yaml"
            degrade.save_chain(path, prov)
            y2, prov2 = degrade.compose_chain(self.X, degrade.load_chain(path))
            np.testing.assert_array_equal(y, y2)
            assert prov2 == prov

    def test_chain_file_round_trip(self, tmp_path):
        chain = DegradationChain([DegradationSpec("additive_noise", {"snr_db": [0, 20]}),
                                  DegradationSpec("bandlimit", {"cutoff_hz": 4000, "order": 8, "type": "lowpass"})], 7)
        degrade.save_chain(tmp_path / "c.yaml", chain)
        assert degrade.load_chain(tmp_path / "c.yaml") == chain

    def test_seed_determinism(self):
        chain = DegradationChain([DegradationSpec("additive_noise", {"snr_db": [0, 20]}),
                                  DegradationSpec("reverb", {"t60": [0.2, 0.5]})], 42)
        a, _ = degrade.compose_chain(self.X, chain)
        b, _ = degrade.compose_chain(self.X, chain)
        np.testing.assert_array_equal(a, b)
        c, _ = degrade.compose_chain(self.X, DegradationChain(chain.specs, 43))
        assert not np.array_equal(a, c)

    def test_order_sensitivity(self):
        noise = {"source": "colored", "color": "white", "seed": 5}
        n = DegradationSpec("additive_noise", {"snr_db": 10.0, "noise": noise})
        lp = DegradationSpec("bandlimit", {"cutoff_hz": 4000, "order": 8, "type": "lowpass"})
        a, _ = degrade.compose_chain(self.X, DegradationChain([n, lp]))
        b, _ = degrade.compose_chain(self.X, DegradationChain([lp, n]))
        f = np.fft.rfftfreq(len(a), 1 / SR)
        hi = f > 6000
        ea, eb = np.sum(np.abs(np.fft.rfft(a))[hi] ** 2), np.sum(np.abs(np.fft.rfft(b))[hi] ** 2)
        assert eb > 100 * ea  # noise added after the lowpass keeps its high band

    def test_every_kind_records_params(self):
        rng = np.random.default_rng(12)
        for kind in degrade.KINDS:
            chain = DegradationChain([DegradationSpec(kind, dict(degrade.DEFAULT_RANGES[kind]))], int(rng.integers(1000)))
            y, prov = degrade.compose_chain(self.X, chain)
            assert len(y) == len(self.X) and np.all(np.isfinite(y))
            for v in prov[0]["params"].values():
                assert not (isinstance(v, list) and kind != "bandlimit")

    def test_level_bound(self):
        chain = DegradationChain([DegradationSpec("level_shift", {"gain_db": 6.0})])
        y, _ = degrade.compose_chain(self.X, chain)
        assert np.max(np.abs(y)) == pytest.approx(np.max(np.abs(self.X)) * 10 ** 0.3)

    def test_sampler_limits(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            chain = degrade.sample_chain(rng, max_ops=4)
            kinds = [s.kind for s in chain.specs]
            assert 1 <= len(kinds) <= 4 and len(set(kinds)) == len(kinds)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            DegradationSpec("telephone")
