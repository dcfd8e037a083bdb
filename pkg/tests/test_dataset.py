import numpy as np
import pytest

from claws.dataset import (DataFormatError, Manifest, ManifestEntry, PreprocStats, SynthConfig,
                           VideoFeatures, fit_stats, load_annotations, load_manifest,
                           load_video_features, make_epoch_order, normalize, read_feature_file,
                           segment_batches, synth_generate, write_feature_file, write_manifest)


def video(m, d=4, label=0, vid="v", seed=0):
    rng = np.random.default_rng(seed)
    return VideoFeatures(vid, label, rng.normal(size=(m, d)), m * 16)


class TestManifest:
    def test_valid(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,label,num_frames,feature_path\na,0,32,a.feat\nb,1,64,b.feat\n")
        man = load_manifest(p)
        assert [e.video_id for e in man.entries] == ["a", "b"]
        assert man.entries[1] == ManifestEntry("b", 1, 64, "b.feat")
        assert man.resolve(man.entries[0]) == tmp_path / "a.feat"

    def test_duplicate(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,label,num_frames,feature_path\na,0,32,a.feat\na,1,64,b.feat\n")
        with pytest.raises(DataFormatError, match="'a'") as exc:
            load_manifest(p)
        assert ":3:" in str(exc.value)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,label,num_frames,feature_path\na,2,32,a.feat\n")
        with pytest.raises(DataFormatError, match="label must be 0 or 1"):
            load_manifest(p)

    def test_too_few_frames(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,label,num_frames,feature_path\na,0,3,a.feat\n")
        with pytest.raises(DataFormatError, match="num_frames"):
            load_manifest(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_manifest(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        man = Manifest([ManifestEntry("x", 0, 48, "f/x.feat"), ManifestEntry("y", 1, 160, "f/y.feat")])
        write_manifest(tmp_path / "a.csv", man)
        write_manifest(tmp_path / "b.csv", load_manifest(tmp_path / "a.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestFeatureFile:
    def test_read(self, tmp_path):
        seg = np.arange(12, dtype=float).reshape(3, 4)
        write_feature_file(tmp_path / "f.feat", seg)
        np.testing.assert_array_equal(read_feature_file(tmp_path / "f.feat"), seg)
        entry = ManifestEntry("f", 1, 48, str(tmp_path / "f.feat"))
        v = load_video_features(entry, expected_d=4)
        assert v.m == 3 and v.label == 1

    def test_header_layout(self, tmp_path):
        write_feature_file(tmp_path / "f.feat", np.ones((2, 3)))
        raw = (tmp_path / "f.feat").read_bytes()
        assert raw[:8] == b"CLWSFEAT"
        assert raw[8:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 20 + 2 * 3 * 4

    def test_truncated(self, tmp_path):
        write_feature_file(tmp_path / "f.feat", np.ones((3, 4)))
        raw = (tmp_path / "f.feat").read_bytes()
        (tmp_path / "f.feat").write_bytes(raw[:-4])
        with pytest.raises(DataFormatError, match="truncated"):
            read_feature_file(tmp_path / "f.feat")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.feat").write_bytes(b"NOTMAGIC" + bytes(12))
        with pytest.raises(DataFormatError, match="magic"):
            read_feature_file(tmp_path / "f.feat")

    def test_dimension_mismatch(self, tmp_path):
        write_feature_file(tmp_path / "f.feat", np.ones((1, 2048), dtype=np.float32))
        with pytest.raises(DataFormatError, match="d=1024"):
            read_feature_file(tmp_path / "f.feat", expected_d=1024)

    def test_round_trip(self, tmp_path, rng):
        write_feature_file(tmp_path / "a.feat", rng.normal(size=(7, 5)))
        write_feature_file(tmp_path / "b.feat", read_feature_file(tmp_path / "a.feat"))
        assert (tmp_path / "a.feat").read_bytes() == (tmp_path / "b.feat").read_bytes()


class TestStats:
    def test_mean(self):
        vs = [VideoFeatures("a", 0, np.array([[1.0, 3.0]]), 16), VideoFeatures("b", 0, np.array([[3.0, 5.0]]), 16)]
        st = fit_stats(vs)
        np.testing.assert_array_equal(st.mean, [2.0, 4.0])
        assert st.computed_over == 2

    def test_single_vector(self):
        st = fit_stats([VideoFeatures("a", 0, np.array([[0.5, -2.0]]), 16)])
        np.testing.assert_array_equal(st.mean, [0.5, -2.0])

    def test_two_pass_oracle(self, rng):
        vs = [VideoFeatures(str(i), 0, rng.normal(3.0, 2.0, size=(100, 6)), 1600) for i in range(100)]
        st = fit_stats(vs)
        # independent two-pass mean: per-dimension sum, then a correction pass
        n = sum(v.m for v in vs)
        first = [sum(float(x) for v in vs for x in v.segments[:, j]) / n for j in range(6)]
        corr = [sum(float(x - first[j]) for v in vs for x in v.segments[:, j]) / n for j in range(6)]
        ref = np.array(first) + np.array(corr)
        assert np.max(np.abs(st.mean - ref)) < 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_stats([])

    def test_normalize(self, rng):
        vs = [video(30, seed=s) for s in range(3)]
        st = fit_stats(vs)
        normed = np.concatenate([normalize(v, st).segments for v in vs])
        assert np.max(np.abs(normed.sum(axis=0))) < 1e-9

    def test_vector_equal_to_mean(self):
        st = PreprocStats(np.array([1.0, 2.0]), 1)
        out = normalize(VideoFeatures("a", 0, np.array([[1.0, 2.0]]), 16), st)
        np.testing.assert_array_equal(out.segments, [[0.0, 0.0]])

    def test_not_idempotent(self):
        st = PreprocStats(np.array([1.0, 1.0]), 1)
        v = VideoFeatures("a", 0, np.array([[3.0, 3.0]]), 16)
        np.testing.assert_array_equal(normalize(normalize(v, st), st).segments, [[1.0, 1.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(DataFormatError):
            normalize(video(3, d=4), PreprocStats(np.zeros(3), 1))

    def test_std_option(self, rng):
        vs = [VideoFeatures("a", 0, rng.normal(0, 5.0, size=(500, 3)), 8000)]
        st = fit_stats(vs, with_std=True)
        out = normalize(vs[0], st).segments
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)

    def test_save_load(self, tmp_path, rng):
        st = fit_stats([video(10)])
        st.save(tmp_path / "s.json")
        back = PreprocStats.load(tmp_path / "s.json")
        np.testing.assert_array_equal(back.mean, st.mean)
        assert back.computed_over == 10


class TestBatches:
    @pytest.mark.parametrize("m,sizes", [(130, [64, 64, 2]), (65, [64]), (64, [64]), (5, [5]), (1, [])])
    def test_sizes(self, m, sizes):
        assert [len(b) for b in segment_batches(video(m), 64)] == sizes

    def test_cover_prefix_in_order(self):
        v = video(150, label=1)
        batches = segment_batches(v, 64)
        rows = np.concatenate([b.features for b in batches])
        np.testing.assert_array_equal(rows, v.segments[: rows.shape[0]])
        assert [b.segment_offset for b in batches] == [0, 64, 128]
        assert all(b.label == 1 and b.video_id == "v" for b in batches)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            segment_batches(video(10), 1)


class TestEpochOrder:
    def test_single(self):
        assert make_epoch_order(1, 0, 3).tolist() == [0]

    def test_deterministic(self):
        np.testing.assert_array_equal(make_epoch_order(50, 4, 9), make_epoch_order(50, 4, 9))
        assert not np.array_equal(make_epoch_order(50, 4, 9), make_epoch_order(50, 5, 9))

    def test_permutation(self):
        assert sorted(make_epoch_order(1000, 2, 1).tolist()) == list(range(1000))


class TestSynth:
    def test_single_normal(self, tmp_path):
        man, ann = synth_generate(SynthConfig(1, 0, 10, 8, 0.3, 3.0, 1), tmp_path)
        assert len(man.entries) == 1
        e = man.entries[0]
        assert e.label == 0 and e.num_frames == 160 and ann == {}
        assert read_feature_file(tmp_path / e.feature_path).shape == (10, 8)

    def test_anomaly_run(self, tmp_path):
        man, ann = synth_generate(SynthConfig(0, 3, 20, 8, 0.3, 50.0, 2), tmp_path, split="test")
        for e in man.entries:
            seg = read_feature_file(tmp_path / e.feature_path)
            shifted = np.where(seg[:, :4].mean(axis=1) > 25)[0]
            assert len(shifted) == 6
            assert np.all(np.diff(shifted) == 1)
            (s, f), = ann[e.video_id]
            assert s == shifted[0] * 16 and f == (shifted[-1] + 1) * 16 - 1
        assert load_annotations(tmp_path / "test_annotations.csv") == ann

    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(2, 2, (5, 9), 4, 0.3, 3.0, 11)
        synth_generate(cfg, tmp_path / "a", "test")
        synth_generate(cfg, tmp_path / "b", "test")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    @pytest.mark.parametrize("kw", [{"anomaly_fraction": 0.0}, {"anomaly_fraction": 1.0},
                                    {"n_normal": 0, "n_abnormal": 0}, {"d": 0}])
    def test_invalid(self, tmp_path, kw):
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(**kw), tmp_path)
