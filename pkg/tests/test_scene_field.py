import numpy as np
import pytest

from frnf import scene_field as sf
from frnf.diffcore import AdamConfig, adam_step, finite_diff_check
from frnf.errors import ConfigError, DimensionError, FormatError


class TestBasis:
    def test_axes_plus_icosahedron_shape(self, basis):
        assert basis.directions.shape == (13, 3)
        assert basis.out_dim == 2 * 13 * 6 == 156

    def test_unit_norms(self, basis):
        norms = np.linalg.norm(basis.directions, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-6)

    def test_first_rows_are_axes(self, basis):
        assert np.array_equal(basis.directions[:3], np.eye(3))

    def test_no_parallel_pairs(self, basis):
        d = basis.directions @ basis.directions.T
        np.fill_diagonal(d, 0.0)
        assert np.abs(d).max() < 1.0 - 1e-6

    def test_deterministic(self):
        a = sf.make_basis("axes_plus_icosahedron", 6)
        b = sf.make_basis("axes_plus_icosahedron", 6)
        assert np.array_equal(a.directions, b.directions)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            sf.make_basis("random_gaussian", 6)

    def test_bad_frequency_count(self):
        with pytest.raises(ConfigError):
            sf.make_basis("axes_plus_icosahedron", 0)


class TestEncoding:
    def test_zero_point(self, basis):
        out = sf.encode_position(np.zeros(3), basis)
        assert out.shape == (156,)
        assert np.all(out[0::2] == 0.0)  # sines
        assert np.all(out[1::2] == 1.0)  # cosines

    def test_hand_value(self, basis):
        # first direction is +x, lowest frequency: sin(pi * 0.5) = 1, cos = 0
        out = sf.encode_position(np.array([0.5, 0.0, 0.0]), basis)
        assert out[0] == pytest.approx(1.0, abs=1e-6)
        assert out[1] == pytest.approx(0.0, abs=1e-6)

    def test_range(self, basis):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (500, 3)).astype(np.float32)
        out = sf.encode_positions(pts, basis)
        assert out.shape == (500, 156)
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_dim_formula(self):
        for L in (1, 3, 5):
            b = sf.make_basis("axes_plus_icosahedron", L)
            p = np.zeros((4, 3), np.float32)
            assert sf.encode_positions(p, b).shape == (4, 2 * 13 * L)


class TestFieldConfig:
    def test_defaults_valid(self):
        cfg = sf.FieldConfig()
        assert cfg.hidden_dim == 256 and cfg.target_feature_dim == 1536

    def test_latent_must_match_hidden(self):
        with pytest.raises(ConfigError):
            sf.FieldConfig(hidden_dim=256, latent_dim=128)

    def test_max_classes_floor(self):
        with pytest.raises(ConfigError):
            sf.FieldConfig(max_classes=1)


def _zero_heads(params):
    for w, b in (params.head_density, params.head_latent, params.head_semantic):
        w.values[:] = 0.0
        b.values[:] = 0.0
    return params


class TestFieldForward:
    def test_zero_heads(self, small_cfg, small_basis, small_params):
        _zero_heads(small_params)
        rho, f, s = sf.field_forward(small_params, small_cfg, small_basis,
                                     np.array([0.1, -0.2, 0.3]))
        assert rho == pytest.approx(np.log(2.0), abs=1e-6)
        assert np.all(f == 0.0) and np.all(s == 0.0)

    def test_batched_equals_individual_bitwise(self, small_cfg, small_basis, small_params):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, (8, 3)).astype(np.float32)
        rho, f, s, _ = sf.field_forward_batch(small_params, small_cfg, small_basis, pts)
        for i in range(8):
            ri, fi, si, _ = sf.field_forward_batch(small_params, small_cfg, small_basis,
                                                   pts[i : i + 1])
            assert np.array_equal(ri[0], rho[i])
            assert np.array_equal(fi[0], f[i])
            assert np.array_equal(si[0], s[i])

    def test_density_nonnegative(self, small_cfg, small_basis):
        rng = np.random.default_rng(5)
        for seed in range(4):
            params = sf.init_scene_params(small_cfg, small_basis, seed=seed)
            pts = rng.uniform(-1, 1, (250, 3)).astype(np.float32)
            rho, _, _, _ = sf.field_forward_batch(params, small_cfg, small_basis, pts)
            assert np.all(rho >= 0.0)

    def test_bad_point_shape(self, small_cfg, small_basis, small_params):
        with pytest.raises(ConfigError):
            sf.field_forward(small_params, small_cfg, small_basis, np.zeros(4))


class TestUpsample:
    def test_zero_map(self, small_params):
        w, b = small_params.upsampler
        w.values[:] = 0.0
        b.values[:] = 0.0
        out = sf.upsample_feature(small_params, np.ones(32, np.float32))
        assert np.all(out == 0.0)

    def test_identity_padded(self, small_params):
        w, b = small_params.upsampler  # (16, 32)
        w.values[:] = 0.0
        b.values[:] = 0.0
        w.values[:, :16] = np.eye(16, dtype=np.float32)
        e1 = np.zeros(32, np.float32)
        e1[0] = 1.0
        out = sf.upsample_feature(small_params, e1)
        expect = np.zeros(16, np.float32)
        expect[0] = 1.0
        assert np.array_equal(out, expect)

    def test_linearity_without_bias(self, small_params):
        w, b = small_params.upsampler
        b.values[:] = 0.0
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = rng.standard_normal(32).astype(np.float32)
            y = rng.standard_normal(32).astype(np.float32)
            a, c = rng.uniform(-2, 2, 2)
            lhs = sf.upsample_feature(small_params, (a * x + c * y).astype(np.float32))
            rhs = a * sf.upsample_feature(small_params, x) + c * sf.upsample_feature(small_params, y)
            assert np.allclose(lhs, rhs, atol=1e-5)

    def test_rejects_matrix(self, small_params):
        with pytest.raises(DimensionError):
            sf.upsample_feature(small_params, np.zeros((2, 32), np.float32))


class TestFootprint:
    def test_default_budget(self, basis):
        cfg = sf.FieldConfig()
        count, nbytes = sf.param_footprint(cfg, basis)
        assert nbytes == 4 * count
        assert nbytes <= 4 * 2 ** 20

    def test_doubling_k_doubles_only_upsampler(self, basis):
        c1 = sf.FieldConfig(target_feature_dim=768)
        c2 = sf.FieldConfig(target_feature_dim=1536)
        n1, _ = sf.param_footprint(c1, basis)
        n2, _ = sf.param_footprint(c2, basis)
        g1 = 768 * 256 + 768
        g2 = 1536 * 256 + 1536
        assert n2 - n1 == g2 - g1
        assert n1 - g1 == n2 - g2  # everything else unchanged

    def test_class_head_arithmetic(self, basis):
        n2, _ = sf.param_footprint(sf.FieldConfig(max_classes=2), basis)
        n16, _ = sf.param_footprint(sf.FieldConfig(max_classes=16), basis)
        assert n16 - n2 == 14 * (256 + 1)

    def test_count_matches_adam_updates(self, small_cfg, small_basis):
        params = sf.init_scene_params(small_cfg, small_basis, seed=0)
        count, _ = sf.param_footprint(small_cfg, small_basis)
        assert sum(b.values.size for b in params.all_blocks()) == count
        changed = 0
        for blk in params.all_blocks():
            before = blk.values.copy()
            blk.grads[:] = 1.0
            adam_step(blk, AdamConfig())
            changed += int(np.sum(blk.values != before))
        assert changed == count


class TestGradients:
    def test_field_forward_gradcheck(self, small_cfg, small_basis, small_params):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.9, 0.9, (6, 3)).astype(np.float32)
        c_rho = rng.standard_normal(6)
        c_f = rng.standard_normal((6, 32))
        c_s = rng.standard_normal((6, 4))

        def loss_at(dtype, grad=False):
            rho, f, s, cache = sf.field_forward_batch(
                small_params, small_cfg, small_basis, pts.astype(dtype), keep_cache=grad)
            if grad:
                sf.field_backward(small_params, small_cfg, cache,
                                  c_rho.astype(dtype), c_f.astype(dtype), c_s.astype(dtype))
            return float(np.sum(c_rho * rho) + np.sum(c_f * f) + np.sum(c_s * s))

        blocks = list(small_params.all_blocks())

        def grad_fn():
            small_params.zero_grads()
            return loss_at(np.float32, grad=True)

        err = finite_diff_check(lambda: loss_at(np.float64), blocks,
                                h=1e-5, n_probes=150, seed=3, grad_fn=grad_fn)
        assert err < 1e-3

    def test_upsample_gradcheck(self, small_params):
        rng = np.random.default_rng(4)
        lat = rng.uniform(-1, 1, (5, 32)).astype(np.float32)
        c = rng.standard_normal((5, 16))

        def loss64():
            out = sf.upsample_features(small_params, lat.astype(np.float64))
            return float(np.sum(c * out))

        blocks = list(small_params.upsampler)

        def grad_fn():
            for b in blocks:
                b.zero_grad()
            sf.upsample_backward(small_params, lat, c.astype(np.float32))
            return loss64()

        err = finite_diff_check(loss64, blocks, h=1e-5, n_probes=80,
                                seed=5, grad_fn=grad_fn)
        assert err < 1e-3


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, small_cfg, small_basis, small_params):
        path = tmp_path / "scene.ckpt"
        sf.save_checkpoint(path, small_cfg, small_params)
        cfg2, params2 = sf.load_checkpoint(path)
        assert cfg2 == small_cfg
        for a, b in zip(small_params.all_blocks(), params2.all_blocks()):
            assert a.name == b.name
            assert np.array_equal(a.values, b.values)
            assert np.all(b.adam_m == 0.0) and np.all(b.adam_v == 0.0)
        # byte-level round trip
        path2 = tmp_path / "again.ckpt"
        sf.save_checkpoint(path2, cfg2, params2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE!" + b"\0" * 64)
        with pytest.raises(FormatError):
            sf.load_checkpoint(p)

    def test_truncated(self, tmp_path, small_cfg, small_basis, small_params):
        p = tmp_path / "trunc.ckpt"
        sf.save_checkpoint(p, small_cfg, small_params)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError, match="truncated"):
            sf.load_checkpoint(p)

    def test_missing_block(self, tmp_path, small_cfg, small_basis, small_params):
        p = tmp_path / "short.ckpt"
        sf.save_checkpoint(p, small_cfg, small_params)
        data = p.read_bytes()
        # drop the final block (upsampler bias) wholesale
        blk = list(small_params.all_blocks())[-1]
        tail = 4 + len(blk.name.encode()) + 8 + 4 * blk.values.size
        p.write_bytes(data[:-tail])
        with pytest.raises(FormatError, match="missing"):
            sf.load_checkpoint(p)
