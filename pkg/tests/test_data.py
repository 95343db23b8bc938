import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.io import wavfile

from hpss_uda import data as D, dsp


class TestSynth:
    @pytest.mark.parametrize("domain", ["A", "B"])
    def test_deterministic_and_additive(self, domain):
        a, b = D.synth_track(domain, 17, 2.0), D.synth_track(domain, 17, 2.0)
        assert a.mixture.tobytes() == b.mixture.tobytes() and a.percussive.tobytes() == b.percussive.tobytes()
        assert np.max(np.abs(a.harmonic + a.percussive - a.mixture)) <= 1e-6
        assert len(a.mixture) == 32000 and a.id == f"{domain}00017"
        assert abs(np.max(np.abs(a.mixture)) - 0.9) < 1e-12

    def test_seeds_and_domains_differ(self):
        assert not np.array_equal(D.synth_track("A", 1, 2.0).mixture, D.synth_track("A", 2, 2.0).mixture)
        assert not np.array_equal(D.synth_track("A", 1, 2.0).mixture, D.synth_track("B", 1, 2.0).mixture)

    def test_rejects(self):
        with pytest.raises(ValueError):
            D.synth_track("C", 0, 2.0)
        with pytest.raises(ValueError):
            D.synth_track("A", 0, 1.5)

    def test_domain_separability_by_centroid(self):
        def centroid(x):
            mag = np.abs(np.fft.rfft(x))
            f = np.fft.rfftfreq(x.size, 1 / 16000)
            return float((f * mag).sum() / mag.sum())

        ca = [centroid(D.synth_track("A", s, 2.0).percussive) for s in range(50)]
        cb = [centroid(D.synth_track("B", s, 2.0).percussive) for s in range(50)]
        values = np.array(ca + cb)
        labels = np.array([0] * 50 + [1] * 50)
        best = max(np.mean((values < thr) == labels) for thr in np.unique(values))
        assert best >= 0.9

    def test_b_percussion_is_low(self):
        t = D.synth_track("B", 3, 3.0)
        mag = np.abs(np.fft.rfft(t.percussive))
        f = np.fft.rfftfreq(t.percussive.size, 1 / 16000)
        assert f[np.argmax(mag)] < 200


class TestWav:
    def test_pcm16_round_trip(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 5000)
        D.write_wav(tmp_path / "a.wav", x, encoding="pcm16")
        y, sr = D.load_wav(tmp_path / "a.wav")
        assert sr == 16000 and np.max(np.abs(x - y)) <= 1 / 32767

    def test_float32_round_trip(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 5000)
        D.write_wav(tmp_path / "a.wav", x)
        y, _ = D.load_wav(tmp_path / "a.wav")
        np.testing.assert_array_equal(y, x.astype(np.float32))

    def test_stereo_identical_channels(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 3000).astype(np.float32)
        wavfile.write(tmp_path / "s.wav", 16000, np.stack([x, x], axis=1))
        wavfile.write(tmp_path / "m.wav", 16000, x)
        np.testing.assert_array_equal(D.load_wav(tmp_path / "s.wav")[0], D.load_wav(tmp_path / "m.wav")[0])

    def test_resampled_tone_peak(self, tmp_path):
        t = np.arange(32000) / 32000
        wavfile.write(tmp_path / "t.wav", 32000, (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
        y, sr = D.load_wav(tmp_path / "t.wav")
        assert sr == 16000 and len(y) == 16000
        spec = dsp.stft(y)
        peak_hz = np.argmax(spec.magnitude.mean(axis=1)) * sr / 512
        assert abs(peak_hz - 440) <= sr / 512

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00garbage")
        with pytest.raises(ValueError):
            D.load_wav(tmp_path / "bad.wav")

    def test_unsupported_encoding(self, tmp_path):
        wavfile.write(tmp_path / "u8.wav", 16000, np.zeros(100, dtype=np.uint8))
        with pytest.raises(ValueError):
            D.load_wav(tmp_path / "u8.wav")
        with pytest.raises(ValueError):
            D.write_wav(tmp_path / "x.wav", np.zeros(10), encoding="mp3")

    def test_track_directory_round_trip(self, tmp_path):
        t = D.synth_track("B", 4, 2.0)
        D.save_track(t, tmp_path / t.id)
        back = D.load_track(tmp_path / t.id, "B")
        assert back.id == t.id and back.labelled
        np.testing.assert_allclose(back.harmonic + back.percussive, back.mixture, atol=1e-6)
        assert [x.id for x in D.load_corpus_dir(tmp_path)] == [t.id]
        with pytest.raises(FileNotFoundError):
            D.load_corpus_dir(tmp_path / "missing")


class TestSplit:
    def test_counts_and_determinism(self):
        tracks = [D.Track(f"t{i}", "A", np.zeros(4)) for i in range(10)]
        s = D.split(tracks, 0.2, 3)
        assert len(s.train) == 8 and len(s.validation) == 2
        assert [t.id for t in D.split(tracks, 0.2, 3).validation] == [t.id for t in s.validation]

    def test_disjoint_over_100_seeds(self):
        tracks = [D.Track(f"t{i}", "A", np.zeros(4)) for i in range(7)]
        for seed in range(100):
            s = D.split(tracks, 0.2, seed)
            tr, va = {t.id for t in s.train}, {t.id for t in s.validation}
            assert not tr & va and len(tr | va) == 7 and len(va) == 1

    def test_too_few(self):
        with pytest.raises(ValueError):
            D.split([D.Track("x", "A", np.zeros(4))])


@pytest.fixture(scope="module")
def patchset():
    tracks = [D.synth_track("A", s, 2.0) for s in range(10)]
    return D.build_patchset(tracks, 400, 128, 32)


class TestBatching:
    def test_count_example(self, patchset):
        assert len(patchset) == 30
        sizes = [len(b.x) for b in D.make_batches(patchset, 8, 0)]
        assert sizes == [8, 8, 8, 6]

    def test_same_seed_same_order(self, patchset):
        a = [b.index.tolist() for b in D.make_batches(patchset, 8, 5)]
        b = [b.index.tolist() for b in D.make_batches(patchset, 8, 5)]
        c = [b.index.tolist() for b in D.make_batches(patchset, 8, 6)]
        assert a == b and a != c

    def test_targets_share_mixture_gain(self):
        t = D.synth_track("A", 2, 2.0)
        x, y, mix_p, _ = D.track_patches(t, 64, 128, 32)
        for k, p in enumerate(mix_p):
            h = np.abs(dsp.stft(t.harmonic, 128, 32).values[:-1, p.offset:p.offset + 64])
            np.testing.assert_allclose(y[k, 0, :, :h.shape[1]], h / p.norm_factor, rtol=1e-12)
        # triangle inequality per bin: |H| + |P| >= |H + P|
        assert np.all(y.sum(axis=1) + 1e-9 >= x[:, 0])

    def test_unlabelled_set(self):
        ps = D.build_patchset([D.synth_track("B", 1, 2.0)], 64, 128, 32, labelled=False)
        assert ps.targets is None and not ps.labelled

    def test_errors(self, patchset):
        with pytest.raises(ValueError):
            list(D.make_batches(patchset, 0, 0))
        with pytest.raises(ValueError):
            D.build_patchset([], 64, 128, 32)

    @given(n=st.integers(1, 20), seed=st.integers(0, 100))
    def test_stream_cycles_without_replacement(self, patchset, n, seed):
        s = D.BatchStream(patchset, seed)
        drawn = np.concatenate([s.take(n).index for _ in range(60 // n + 2)])
        first = drawn[:30]
        assert sorted(first.tolist()) == list(range(30))
