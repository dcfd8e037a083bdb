import numpy as np
import pytest

from claws.clustering import cluster_video
from claws.dataset import Batch, SynthConfig, VideoFeatures, fit_stats, load_manifest, load_split, \
    normalize, synth_generate
from claws.model import ClawsParams, init_params, intermediate_representation, load_checkpoint
from claws.trainer import (METRICS_HEADER, OptState, Toggles, TrainConfig, TrainingError, lr_at,
                           rmsprop_step, train, training_step)
from conftest import central_diff, max_rel_err

SMALL = (8, 6, 4)


def tiny_set(seed=0, d=8):
    rng = np.random.default_rng(seed)
    vids = []
    for i in range(4):
        label = i % 2
        seg = rng.normal(size=(int(rng.integers(12, 20)), d))
        if label:
            seg[3:8, :2] += 3.0
        vids.append(VideoFeatures(f"v{i}", label, seg, seg.shape[0] * 16))
    return vids


def small_cfg(**kw):
    base = dict(total_iters=30, lr=1e-3, lr_drop_at=20, batch_size=5, seed=3, dims=SMALL)
    base.update(kw)
    return TrainConfig(**base)


class TestRmsprop:
    def _one(self, g, v=None):
        p = init_params(0, 2, 2, 2)
        grads = {n: np.full_like(a, g) for n, a in p.items()}
        st = OptState(v if v is not None else ClawsParams.zeros(2, 2, 2))
        new_p, new_st = rmsprop_step(p, grads, st, 1e-4)
        return p, new_p, new_st

    def test_zero_gradient(self):
        v0 = ClawsParams.zeros(2, 2, 2)
        v0.W1[:] = 0.5
        p, new_p, st = self._one(0.0, v0)
        for (_, a), (_, b) in zip(p.items(), new_p.items()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(st.v.W1, 0.495)
        assert st.iteration == 1

    def test_first_step_arithmetic(self):
        p, new_p, st = self._one(1.0)
        np.testing.assert_allclose(st.v.W1, 0.01, rtol=1e-15)
        step = new_p.W1 - p.W1
        np.testing.assert_allclose(step, -1e-4 / (0.1 + 1e-8), rtol=1e-12)
        assert abs(step[0, 0] - -9.9999990e-4) < 1e-11

    def test_scale_invariance(self):
        p, a, _ = self._one(1.0)
        _, b, _ = self._one(10.0)
        da, db = a.W1 - p.W1, b.W1 - p.W1
        assert np.max(np.abs(da - db) / np.abs(da)) < 1e-6

    def test_inputs_untouched(self):
        p = init_params(0, 2, 2, 2)
        before = p.copy()
        rmsprop_step(p, {n: np.ones_like(a) for n, a in p.items()}, OptState(ClawsParams.zeros(2, 2, 2)), 0.1)
        np.testing.assert_array_equal(p.W1, before.W1)

    def test_non_finite(self):
        p = init_params(0, 2, 2, 2)
        grads = {n: np.zeros_like(a) for n, a in p.items()}
        grads["W2"][0, 0] = np.nan
        with pytest.raises(TrainingError, match="W2"):
            rmsprop_step(p, grads, OptState(ClawsParams.zeros(2, 2, 2), 17), 1e-4)
        with pytest.raises(TrainingError, match="iteration 17"):
            rmsprop_step(p, grads, OptState(ClawsParams.zeros(2, 2, 2), 17), 1e-4)


class TestSchedule:
    def test_default(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(79_999, cfg) == 1e-4
        assert lr_at(80_000, cfg) == pytest.approx(1e-5, rel=1e-12)

    def test_constant(self):
        cfg = TrainConfig(lr_drop_factor=1.0)
        assert lr_at(0, cfg) == lr_at(99_999, cfg) == 1e-4

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"lr_drop_factor": 0}, {"lr_drop_factor": 1.5},
                                    {"lr_drop_at": 10, "total_iters": 5}, {"cluster_mode": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainingStep:
    @pytest.mark.parametrize("label", [0, 1])
    @pytest.mark.parametrize("mode", ["assignment", "scalar"])
    def test_gradient_matches_finite_differences(self, label, mode):
        rng = np.random.default_rng(label)
        x = rng.normal(size=(10, 8))
        p = init_params(5, *SMALL)
        for name, a in p.items():
            if name.startswith("b"):
                a[:] = rng.normal(scale=0.1, size=a.shape)
        cfg = small_cfg(dropout_rate=0.0, cluster_mode=mode)
        state = cluster_video(intermediate_representation(x, p, 5), "v", 0, 0)
        batch = Batch("v", label, x[:5], 0)
        grads, _ = training_step(batch, p, cfg, state, 10)
        for name, a in p.items():
            def f(val, name=name):
                q = p.copy()
                getattr(q, name)[...] = val
                return training_step(batch, q, cfg, state, 10)[1].total
            assert max_rel_err(grads[name], central_diff(f, a)) < 1e-4, name

    def test_pred_only_breakdown(self):
        v = tiny_set()[1]
        cfg = small_cfg(toggles=Toggles.bbn_only(), dropout_rate=0.0)
        _, bd = training_step(Batch(v.video_id, 1, v.segments[:5], 0), init_params(0, *SMALL), cfg, None, v.m)
        assert bd.cluster == bd.ts == bd.sparsity == 0.0
        assert bd.total == pytest.approx(0.9 * bd.pred, abs=1e-15)


class TestTrain:
    def test_zero_iterations(self, tmp_path):
        vids = tiny_set()
        res = train(vids, small_cfg(total_iters=0, lr_drop_at=0), tmp_path)
        init = init_params(3, *SMALL)
        for (_, a), (_, b) in zip(res.params.items(), init.items()):
            np.testing.assert_array_equal(a, b)
        assert res.metrics == []
        assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(METRICS_HEADER)
        assert load_checkpoint(tmp_path / "final.ckpt")[2] == 0

    def test_deterministic_checkpoints(self, tmp_path):
        vids = tiny_set()
        cfg = small_cfg(total_iters=200, lr_drop_at=150, checkpoint_every=100)
        train(vids, cfg, tmp_path / "a")
        train(vids, cfg, tmp_path / "b")
        for name in ("final.ckpt", "ckpt_0000100.bin", "metrics.csv", "clusters.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_result(self):
        vids = tiny_set()
        a = train(vids, small_cfg(seed=1)).params
        b = train(vids, small_cfg(seed=2)).params
        assert not np.array_equal(a.W1, b.W1)

    def test_resume_matches_single_run(self):
        vids = tiny_set()
        whole = train(vids, small_cfg(total_iters=40, lr_drop_at=30))
        half = train(vids, small_cfg(total_iters=20, lr_drop_at=20))
        # the schedule must match the long run, so resume with the long config
        rest = train(vids, small_cfg(total_iters=40, lr_drop_at=30), params=half.params, state=half.state)
        np.testing.assert_array_equal(whole.params.W1, rest.params.W1)
        assert rest.state.iteration == 40

    def test_metrics_every_hundred(self, tmp_path):
        res = train(tiny_set(), small_cfg(total_iters=250, lr_drop_at=200), tmp_path)
        assert [r["iteration"] for r in res.metrics] == [100, 200]
        assert res.metrics[1]["lr"] == 1e-3
        rows = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(rows) == 3
        assert all(np.isfinite(r["total"]) for r in res.metrics)

    @pytest.mark.parametrize("toggles", [
        Toggles.bbn_only(),
        Toggles(rbs=True, nsm1=False, nsm2=False, loss_ts_s=False, loss_c=False),
        Toggles(rbs=True, nsm1=True, nsm2=False, loss_ts_s=False, loss_c=False),
        Toggles(rbs=True, nsm1=True, nsm2=True, loss_ts_s=False, loss_c=False),
        Toggles(rbs=True, nsm1=True, nsm2=True, loss_ts_s=True, loss_c=False),
        Toggles(),
    ])
    def test_toggle_grid_runs(self, toggles):
        res = train(tiny_set(), small_cfg(toggles=toggles))
        assert res.state.iteration == 30
        assert bool(res.clusters) == toggles.loss_c

    def test_toggles_change_training(self):
        a = train(tiny_set(), small_cfg()).params
        b = train(tiny_set(), small_cfg(toggles=Toggles(nsm1=False))).params
        assert not np.array_equal(a.W1, b.W1)
        np.testing.assert_array_equal(b.Wn1, init_params(3, *SMALL).Wn1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            train(tiny_set(d=5), small_cfg())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_checkpoint(self, tmp_path):
        vids = tiny_set()
        vids[0].segments[0, 0] = np.inf
        with pytest.raises(TrainingError, match="non-finite"):
            train(vids, small_cfg(toggles=Toggles(rbs=False, loss_c=False)), tmp_path)
        assert (tmp_path / "aborted.ckpt").is_file()

    def test_empty(self):
        with pytest.raises(TrainingError):
            train([], small_cfg())


def test_synthetic_training_progress(tmp_path):
    """Full configuration on the synthetic set: loss falls over 5k iterations."""
    synth_generate(SynthConfig(seed=7), tmp_path, "train")
    vids = load_split(load_manifest(tmp_path / "train_manifest.csv"), 16)
    stats = fit_stats(vids)
    vids = [normalize(v, stats) for v in vids]
    cfg = TrainConfig(total_iters=5000, lr_drop_at=4000, seed=7, dims=(16, 512, 32))
    res = train(vids, cfg)
    assert res.metrics[-1]["iteration"] == 5000
    assert res.metrics[-1]["total"] < res.metrics[0]["total"]
