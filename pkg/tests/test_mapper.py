import numpy as np
import pytest
from scipy import stats

from frnf import features as ft
from frnf import mapper as mp
from frnf import simio
from frnf.errors import DecisionError, StateError
from frnf.renderer import Camera


@pytest.fixture(scope="module")
def single_frame_setup():
    scene, spec = simio.standard_fixtures("single_frame", seed=0)
    gt = simio.render_ground_truth(scene, spec.trajectory[0], spec.cam)
    fmap = ft.crop_padding(
        ft.oracle_features(scene, spec.trajectory[0], spec.cam, spec.oracle, seed=3))
    return scene, spec, gt, fmap


def _fresh_state(spec, scene, gt, fmap, seed=1, clicks=()):
    state = mp.make_train_state(spec.cam, scene.bounds,
                                target_feature_dim=spec.oracle.dim, seed=seed)
    frame = mp.Frame(0, spec.trajectory[0], gt.depth, fmap, clicks=list(clicks))
    state.keyframes.append(frame)
    return state


class TestKeyframeDecision:
    def test_perfect_depth_keeps_frame_out(self):
        d = np.full((10, 10), 2.0)
        assert mp.keyframe_decision(d, d, mp.MapperConfig()) is False

    def test_seventy_percent_bad(self):
        measured = np.full(100, 1.0)
        rendered = measured.copy()
        rendered[:70] = 1.2  # 20% relative error on 70% of pixels
        assert mp.keyframe_decision(rendered, measured, mp.MapperConfig()) is True

    def test_boundary_fraction_strict(self):
        measured = np.full(100, 1.0)
        rendered = measured.copy()
        rendered[:65] = 1.2
        assert mp.keyframe_decision(rendered, measured, mp.MapperConfig()) is False

    def test_boundary_error_strict(self):
        # error exactly at threshold does not count as exceeding it
        # (0.125 is exactly representable, so the comparison is exact)
        measured = np.full(100, 1.0)
        rendered = np.full(100, 1.125)
        cfg = mp.MapperConfig(kf_rel_error_threshold=0.125)
        assert mp.keyframe_decision(rendered, measured, cfg) is False

    def test_invalid_pixels_excluded(self):
        measured = np.zeros(100)
        measured[:10] = 1.0
        rendered = np.full(100, 5.0)  # bad everywhere, but only 10 pixels valid
        assert mp.keyframe_decision(rendered, measured, mp.MapperConfig()) is True

    def test_no_valid_pixels(self):
        with pytest.raises(DecisionError):
            mp.keyframe_decision(np.ones(4), np.zeros(4), mp.MapperConfig())


class TestSampleDepthPixels:
    def test_in_bounds(self, cam):
        px = mp.sample_depth_pixels(cam, 1, seed=0)
        assert px.shape == (1, 2)
        assert 0 <= px[0, 0] < cam.width and 0 <= px[0, 1] < cam.height

    def test_deterministic(self, cam):
        a = mp.sample_depth_pixels(cam, 50, seed=7)
        b = mp.sample_depth_pixels(cam, 50, seed=7)
        assert np.array_equal(a, b)

    def test_chi_square_uniformity(self):
        cam = Camera(fx=10, fy=10, cx=1.5, cy=1.5, width=4, height=4, near=0.1, far=4)
        px = mp.sample_depth_pixels(cam, 16000, seed=123)
        counts = np.zeros(16)
        for u, v in px:
            counts[v * 4 + u] += 1
        chi2 = float(np.sum((counts - 1000.0) ** 2 / 1000.0))
        assert chi2 < stats.chi2.ppf(0.999, df=15)


class TestSelectSupervision:
    def _kfs(self, n, fmap):
        pose = simio.look_at_pose((0, -2, 1.5), (0, 0, 0))
        return [mp.Frame(i, pose, np.ones((4, 4), np.float32), fmap) for i in range(n)]

    def test_empty_keyframes(self, cam):
        with pytest.raises(StateError):
            mp.select_supervision([], 4, 0, cam=cam)

    def test_single_keyframe_with_clicks(self, single_frame_setup, cam):
        _, _, _, fmap = single_frame_setup
        kfs = self._kfs(1, fmap)
        kfs[0].clicks = [(3, 2, 0), (1, 1, 1)]
        items = mp.select_supervision(kfs, 4, 0, cam=cam)
        assert len(items) == 1
        assert items[0].clicks == [(3, 2, 0), (1, 1, 1)]

    def test_latest_always_selected(self, single_frame_setup, cam):
        _, _, _, fmap = single_frame_setup
        kfs = self._kfs(6, fmap)
        for step in range(100):
            items = mp.select_supervision(kfs, 3, step, cam=cam)
            assert any(it.keyframe.frame_id == 5 for it in items)

    def test_uniform_selection_frequency(self, single_frame_setup, cam):
        _, _, _, fmap = single_frame_setup
        kfs = self._kfs(5, fmap)
        rng = np.random.default_rng(0)
        hits = np.zeros(4)
        n_draws = 10_000
        for _ in range(n_draws):
            items = mp.select_supervision(kfs, 3, rng, cam=cam,
                                          n_depth_samples=1, n_feature_samples=1)
            for it in items:
                if it.keyframe.frame_id != 4:
                    hits[it.keyframe.frame_id] += 1
        freq = hits / n_draws
        assert np.all(np.abs(freq - 0.5) < 0.05)


class TestComputeLosses:
    def test_perfect_depth_and_zero_features(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap)
        # zero upsampler so rendered features are 0; zero targets to match
        for blk in state.params.upsampler:
            blk.values[:] = 0.0
        rng = np.random.default_rng(0)
        items = mp.select_supervision(state.keyframes, 4, rng, n_depth_samples=20,
                                      n_feature_samples=4, cam=spec.cam)
        mcfg = mp.MapperConfig()
        batch = mp.build_batch(items, spec.cam, mcfg, rng, n_active=0)
        batch.feat_targets[:] = 0.0
        # force rendered depth to equal targets by rendering first
        report = mp.compute_losses(state.params, state.field_cfg, state.basis,
                                   mcfg, batch, state.bounds)
        res = mp.trace_rays(state.params, state.field_cfg, state.basis,
                            batch.depth.origins, batch.depth.dirs,
                            batch.depth.bin_depths, batch.depth.bin_deltas, state.bounds)
        batch.depth_targets = res.depth.copy()
        report = mp.compute_losses(state.params, state.field_cfg, state.basis,
                                   mcfg, batch, state.bounds)
        assert report.l_depth == pytest.approx(0.0, abs=1e-7)
        assert report.l_feat == pytest.approx(0.0, abs=1e-9)

    def test_uniform_click_cross_entropy(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap,
                             clicks=[(80, 60, 0), (40, 30, 1), (20, 20, 2), (100, 80, 3)])
        # opaque field with all-equal logits: softmax over 4 classes is uniform
        state.params.head_density[1].values[:] = 30.0
        state.params.head_semantic[0].values[:] = 0.0
        state.params.head_semantic[1].values[:] = 0.0
        rng = np.random.default_rng(1)
        items = mp.select_supervision(state.keyframes, 4, rng, n_depth_samples=1,
                                      n_feature_samples=1, cam=spec.cam)
        mcfg = mp.MapperConfig()
        batch = mp.build_batch(items, spec.cam, mcfg, rng, n_active=4)
        report = mp.compute_losses(state.params, state.field_cfg, state.basis,
                                   mcfg, batch, state.bounds)
        assert report.l_sem == pytest.approx(np.log(4.0), abs=1e-5)

    def test_feature_weight_scales_total(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap)
        rng = np.random.default_rng(2)
        items = mp.select_supervision(state.keyframes, 4, rng, n_depth_samples=8,
                                      n_feature_samples=8, cam=spec.cam)
        mcfg1 = mp.MapperConfig(lambda_feat=1.0)
        batch = mp.build_batch(items, spec.cam, mcfg1, rng, n_active=0)
        r1 = mp.compute_losses(state.params, state.field_cfg, state.basis,
                               mcfg1, batch, state.bounds)
        mcfg2 = mp.MapperConfig(lambda_feat=2.0)
        r2 = mp.compute_losses(state.params, state.field_cfg, state.basis,
                               mcfg2, batch, state.bounds)
        assert r2.l_feat == pytest.approx(r1.l_feat, rel=1e-12)
        assert r2.l_total == pytest.approx(r1.l_total + r1.l_feat, abs=1e-9)

    def test_sem_loss_ignores_inactive_logits(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap, clicks=[(80, 60, 0), (40, 30, 1)])
        rng = np.random.default_rng(3)
        items = mp.select_supervision(state.keyframes, 4, rng, n_depth_samples=1,
                                      n_feature_samples=1, cam=spec.cam)
        mcfg = mp.MapperConfig()
        batch = mp.build_batch(items, spec.cam, mcfg, rng, n_active=2)
        before = mp.compute_losses(state.params, state.field_cfg, state.basis,
                                   mcfg, batch, state.bounds)
        # perturb weights feeding only inactive class logits (rows >= 2)
        state.params.head_semantic[0].values[2:] += 5.0
        state.params.head_semantic[1].values[0, 2:] -= 3.0
        after = mp.compute_losses(state.params, state.field_cfg, state.basis,
                                  mcfg, batch, state.bounds)
        assert after.l_sem == pytest.approx(before.l_sem, rel=1e-12)


class TestMappingStep:
    def test_deterministic_loss_curves(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup

        def run():
            state = _fresh_state(spec, scene, gt, fmap, seed=5, clicks=[(80, 60, 0)])
            state.registry.clicks = []
            from frnf.semantics import add_click
            add_click(state.registry, 0, 80, 60)
            mcfg = mp.MapperConfig(n_depth_samples=32, n_feature_samples=8)
            return [mp.mapping_step(state, mcfg).l_total for _ in range(5)]

        assert run() == run()

    def test_loss_trend_decreases(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap, seed=2)
        mcfg = mp.MapperConfig(n_depth_samples=64, n_feature_samples=16, lambda_sem=0.0)
        losses = [mp.mapping_step(state, mcfg).l_total for _ in range(100)]
        assert np.mean(losses[90:]) < np.mean(losses[:10])

    def test_metrics_record_fields(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap, seed=2)
        m = mp.mapping_step(state, mp.MapperConfig(n_depth_samples=8, n_feature_samples=2))
        rec = m.record()
        assert set(rec) == {"step", "L_depth", "L_feat", "L_sem", "L_total",
                            "n_keyframes", "ms"}
        assert rec["step"] == 1 and rec["n_keyframes"] == 1

    def test_keyframe_count_monotone(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap, seed=2)
        mcfg = mp.MapperConfig(n_depth_samples=16, n_feature_samples=4)
        counts = []
        rng = np.random.default_rng(0)
        for i in range(6):
            pose = simio.look_at_pose(rng.uniform(-0.5, 0.5, 3) + (0, -2.0, 1.5),
                                      (0, 0, 0))
            gt_i = simio.render_ground_truth(scene, pose, spec.cam)
            frame = mp.Frame(i + 1, pose, gt_i.depth, fmap)
            mp.ingest_frame(state, frame, mcfg)
            counts.append(len(state.keyframes))
        assert all(a <= b for a, b in zip(counts, counts[1:]))


class TestIngestFrame:
    def test_first_frame_always_added(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        state = mp.make_train_state(spec.cam, scene.bounds,
                                    target_feature_dim=spec.oracle.dim, seed=0)
        out = mp.ingest_frame(state, mp.Frame(0, spec.trajectory[0], gt.depth, fmap),
                              mp.MapperConfig())
        assert out["added_keyframe"] is True

    def test_untrained_view_added(self, single_frame_setup):
        # a frame seen by a fresh network renders garbage depth, so it joins
        scene, spec, gt, fmap = single_frame_setup
        state = _fresh_state(spec, scene, gt, fmap, seed=0)
        pose = simio.look_at_pose((1.8, 1.8, 1.6), (0, 0, 0))
        gt2 = simio.render_ground_truth(scene, pose, spec.cam)
        out = mp.ingest_frame(state, mp.Frame(1, pose, gt2.depth, fmap),
                              mp.MapperConfig())
        assert out["added_keyframe"] is True


class TestFrameQueue:
    def test_drops_oldest_on_overflow(self, single_frame_setup):
        scene, spec, gt, fmap = single_frame_setup
        q = mp.FrameQueue(capacity=2)
        frames = [mp.Frame(i, spec.trajectory[0], gt.depth, fmap) for i in range(3)]
        for f in frames:
            q.push(f)
        assert q.dropped == 1
        assert q.pop().frame_id == 1
        assert q.pop().frame_id == 2
        assert q.pop() is None
