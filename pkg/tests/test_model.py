import numpy as np
import pytest

import foldreg.autodiff as ad
from foldreg.model import (
    FaimConfig,
    build_faim,
    describe,
    direct_field_model,
    faim_apply,
    faim_forward,
    load_checkpoint,
    param_count,
    params_from_checkpoint,
    save_checkpoint,
)
from foldreg.volume import FormatError, Volume


def hand_counted_params(cfg: FaimConfig) -> int:
    """Closed-form parameter total from the layer table."""
    cb, c0, c1, c2 = cfg.branch_channels, cfg.merge_channels, cfg.enc1_channels, cfg.enc2_channels
    total = 0
    for k in cfg.branch_kernels:
        total += cb * 2 * k**3 + cb + cb  # kernel + bias + prelu slopes
    nb = len(cfg.branch_kernels)
    total += c0 * (nb * cb) * 1 + c0 + c0
    total += c1 * c0 * 27 + c1 + c1
    total += c2 * c1 * 27 + c2 + c2
    total += c2 * c2 * 27 + c2 + c2
    total += c2 * c1 * 8 + c1 + c1
    total += c1 * c0 * 8 + c0 + c0
    total += 3 * c0 * cfg.head_kernel**3 + 3
    return total


class TestBuild:
    def test_param_count_matches_hand_count(self):
        cfg = FaimConfig()
        params = build_faim(cfg, seed=0)
        assert param_count(params) == hand_counted_params(cfg)

    def test_param_count_custom_config(self):
        cfg = FaimConfig(branch_kernels=(3, 5), branch_channels=4, merge_channels=8,
                         enc1_channels=8, enc2_channels=16, head_kernel=5)
        params = build_faim(cfg, seed=1)
        assert param_count(params) == hand_counted_params(cfg)

    def test_same_seed_bit_identical(self):
        a = build_faim(FaimConfig(), seed=7)
        b = build_faim(FaimConfig(), seed=7)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_different_seed_differs(self):
        a = build_faim(FaimConfig(), seed=7)
        b = build_faim(FaimConfig(), seed=8)
        assert any(not np.array_equal(a.tensors[n].data, b.tensors[n].data) for n in a.tensors)

    def test_resolution_independent(self):
        # parameter count is a function of the config only
        params = build_faim(FaimConfig(), seed=0)
        n = param_count(params)
        rng = np.random.default_rng(0)
        for size in (8, 16):
            src = Volume(rng.random((size,) * 3, dtype=np.float32))
            tgt = Volume(rng.random((size,) * 3, dtype=np.float32))
            faim_forward(params, src, tgt)
            assert param_count(params) == n

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            build_faim(FaimConfig(branch_kernels=(4,)), seed=0)
        with pytest.raises(ValueError):
            build_faim(FaimConfig(merge_channels=0), seed=0)

    def test_graph_has_three_add_skips_and_linear_head(self):
        params = build_faim(FaimConfig(), seed=0)
        x = ad.Tensor(np.zeros((2, 8, 8, 8), dtype=np.float32))
        out = faim_apply(params, x)
        ops = []
        stack, seen = [out], set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            ops.append(node.op)
            stack.extend(node.parents)
        assert ops.count("add") == 3
        assert out.op == "conv3d"  # linear head, no activation on top
        assert out.data.shape[0] == 3
        assert "pool" not in " ".join(ops)


class TestForward:
    def test_output_shape(self):
        params = build_faim(FaimConfig(), seed=0)
        rng = np.random.default_rng(1)
        src = Volume(rng.random((16, 16, 16), dtype=np.float32))
        tgt = Volume(rng.random((16, 16, 16), dtype=np.float32))
        u = faim_forward(params, src, tgt)
        assert u.dims == (16, 16, 16)
        assert u.data.shape[0] == 3

    def test_near_zero_at_init(self):
        params = build_faim(FaimConfig(), seed=0)
        rng = np.random.default_rng(2)
        src = Volume(rng.random((12, 12, 12), dtype=np.float32))
        tgt = Volume(rng.random((12, 12, 12), dtype=np.float32))
        u = faim_forward(params, src, tgt)
        assert float(np.abs(u.data).max()) < 0.1

    def test_ordered_pair_asymmetry(self):
        params = build_faim(FaimConfig(), seed=0)
        rng = np.random.default_rng(3)
        src = Volume(rng.random((8, 8, 8), dtype=np.float32))
        tgt = Volume(rng.random((8, 8, 8), dtype=np.float32))
        u_st = faim_forward(params, src, tgt)
        u_ts = faim_forward(params, tgt, src)
        assert not np.array_equal(u_st.data, u_ts.data)

    def test_deterministic_forward(self):
        params = build_faim(FaimConfig(), seed=0)
        rng = np.random.default_rng(4)
        src = Volume(rng.random((8, 8, 8), dtype=np.float32))
        tgt = Volume(rng.random((8, 8, 8), dtype=np.float32))
        u1 = faim_forward(params, src, tgt)
        u2 = faim_forward(params, src, tgt)
        assert np.array_equal(u1.data, u2.data)

    def test_dims_not_divisible_by_four(self):
        params = build_faim(FaimConfig(), seed=0)
        rng = np.random.default_rng(5)
        src = Volume(rng.random((6, 6, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible by 4"):
            faim_forward(params, src, src)


class TestDirectModel:
    def test_zero_init(self):
        params = direct_field_model((8, 8, 8), seed=0)
        field = params.tensors["field"].data
        assert field.shape == (3, 8, 8, 8)
        assert not field.any()

    def test_param_count(self):
        params = direct_field_model((16, 16, 16), seed=0)
        assert param_count(params) == 3 * 16**3

    def test_one_adam_step_descends(self):
        from foldreg import optim
        from foldreg.trainer import TrainConfig, _loss_and_grad

        rng = np.random.default_rng(6)
        src = Volume(rng.random((8, 8, 8), dtype=np.float32))
        tgt = Volume(rng.random((8, 8, 8), dtype=np.float32))
        cfg = TrainConfig(lr=1e-3, alpha=0.1, beta=0.0, cc_mode="global")
        params = direct_field_model((8, 8, 8), seed=0)
        field = params.tensors["field"].data
        state = optim.adam_init({"field": field}, lr=cfg.lr)
        bd0, g = _loss_and_grad(src, tgt, field, cfg)
        optim.adam_step({"field": field}, {"field": g}, state)
        bd1, _ = _loss_and_grad(src, tgt, field, cfg)
        assert bd1.total < bd0.total

    def test_high_beta_unfolds_seeded_folding(self):
        # hand-seeded folding field on a 16^3 toy: optimizing the penalty
        # alone drives the folding count to zero
        from foldreg import optim
        from foldreg.jacobian import det_map, folding_count, r2_backward
        from foldreg.volume import DisplacementField

        grid = np.indices((16, 16, 16)).astype(np.float64)
        u = np.zeros((3, 16, 16, 16), dtype=np.float32)
        u[0] = (-4.0 * np.sin(np.pi * grid[0] / 8)).astype(np.float32)
        assert folding_count(det_map(DisplacementField(u))) > 0
        state = optim.adam_init({"u": u}, lr=0.05)
        for _ in range(200):
            g = r2_backward(DisplacementField(u))
            if not g.any():
                break
            optim.adam_step({"u": u}, {"u": g}, state)
        assert folding_count(det_map(DisplacementField(u))) == 0


class TestDescribe:
    def test_reports_skips_and_head(self):
        text = describe(build_faim(FaimConfig(), seed=0))
        assert "add skips: 3" in text
        assert "pooling layers: 0" in text
        assert "linear" in text
        assert "179787" in text

    def test_direct_model_parameter_total(self):
        text = describe(direct_field_model((16, 16, 16), seed=0))
        assert str(3 * 16**3) in text


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = build_faim(FaimConfig(), seed=3)
        meta = {"kind": "faim", **params.config.to_meta(), "note": "x=1"}
        path = tmp_path / "m.fck"
        save_checkpoint(path, meta, params.arrays())
        meta2, arrays = load_checkpoint(path)
        assert meta2 == meta
        for name, t in params.tensors.items():
            assert np.array_equal(arrays[name], t.data)
        rebuilt = params_from_checkpoint(meta2, arrays)
        for name, t in params.tensors.items():
            assert np.array_equal(rebuilt.tensors[name].data, t.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.fck"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(FormatError, match="bad magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        params = build_faim(FaimConfig(), seed=3)
        path = tmp_path / "m.fck"
        save_checkpoint(path, {"kind": "faim", **params.config.to_meta()}, params.arrays())
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_direct_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        arrays = {"field:a:b": rng.standard_normal((3, 4, 4, 4)).astype(np.float32)}
        meta = {"kind": "direct", "dims": "4,4,4"}
        path = tmp_path / "d.fck"
        save_checkpoint(path, meta, arrays)
        meta2, arrays2 = load_checkpoint(path)
        assert np.array_equal(arrays2["field:a:b"], arrays["field:a:b"])
        assert meta2["dims"] == "4,4,4"
