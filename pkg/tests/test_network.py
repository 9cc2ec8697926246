"""Network assembly, forward contracts, training loop, and checkpoint tests."""

import numpy as np
import pytest

from gcdn.autodiff import Tensor, grad_check, mse
from gcdn.checkpoint import load_checkpoint, save_checkpoint
from gcdn.data import synthetic_gallery
from gcdn.network import (
    Checkpoint,
    ConfigError,
    ModelConfig,
    TrainingDiverged,
    adam_from_checkpoint,
    build_network,
    checkpoint_from_model,
    denoise,
    forward,
    lr_schedule,
    model_from_checkpoint,
    full_scale_config,
    parameter_count,
    train,
)


def micro_config(**overrides):
    cfg = ModelConfig(
        features=6,
        branch_features=2,
        lpf_blocks=1,
        knn=2,
        window=9,
        rank=2,
        shifts=1,
        patch=8,
        batch=2,
        iters=10,
        sigma=25.0,
        seed=3,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def zero_model_part(params_list):
    for _, p in params_list:
        p.data[...] = 0.0


class TestConfig:
    def test_full_scale_builds(self):
        cfg = full_scale_config()
        model = build_network(cfg, seed=0)
        n = parameter_count(model)
        assert n > 100_000

    def test_desk_scale_builds_and_reports_count(self):
        cfg = ModelConfig().validate()
        model = build_network(cfg, seed=0)
        n = parameter_count(model)
        declared = sum(p.data.size for _, p in model.named_parameters())
        assert n == declared > 10_000

    def test_branch_feature_invariant(self):
        with pytest.raises(ConfigError, match="branch_features"):
            ModelConfig(features=48, branch_features=15).validate()

    def test_shifts_divisibility(self):
        with pytest.raises(ConfigError, match="shifts"):
            ModelConfig(features=48, branch_features=16, rank=5, shifts=7).validate()

    def test_window_oddness(self):
        with pytest.raises(ConfigError, match="window"):
            ModelConfig(window=20).validate()

    def test_kv_roundtrip(self):
        cfg = micro_config(sigma=15.0, attention_only=True)
        back = ModelConfig.from_kv(cfg.to_kv())
        assert back == cfg

    def test_build_determinism(self):
        cfg = micro_config()
        a = build_network(cfg, seed=11)
        b = build_network(cfg, seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = build_network(cfg, seed=12)
        diff = any(
            not np.array_equal(pa.data, pc.data)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        )
        assert diff


class TestForward:
    def test_zero_final_layer_identity(self):
        cfg = micro_config()
        model = build_network(cfg, seed=0, dtype=np.float64)
        zero_model_part(model.final.named_parameters("final."))
        rng = np.random.default_rng(0)
        img = rng.random((12, 12))
        out = forward(model, img, graph_mode="infer")
        np.testing.assert_array_equal(out.data[0, :, :, 0], img)

    def test_infer_deterministic(self):
        cfg = micro_config()
        model = build_network(cfg, seed=1, dtype=np.float64)
        img = np.random.default_rng(1).random((14, 14))
        a = forward(model, img, graph_mode="infer").data
        b = forward(model, img, graph_mode="infer").data
        np.testing.assert_array_equal(a, b)

    def test_train_vs_covering_window_infer(self):
        cfg = micro_config()
        model = build_network(cfg, seed=2, dtype=np.float64)
        img = np.random.default_rng(2).random((10, 10))
        a = forward(model, img, graph_mode="train", bn_mode="infer").data
        b = forward(
            model, img, graph_mode="infer", bn_mode="infer", window=2 * 10 + 1
        ).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_graph_shared_within_block(self):
        cfg = micro_config()
        model = build_network(cfg, seed=3, dtype=np.float64)
        img = np.random.default_rng(3).random((10, 10))
        trace = {}
        forward(model, img, graph_mode="infer", trace=trace)
        by_block = {}
        for entry in trace["layers"]:
            if entry["kind"] != "gconv" or "." not in entry["name"]:
                continue
            block = entry["name"].split(".")[0]
            by_block.setdefault(block, []).append(entry["graph_idx"])
        for block in ("hpf", "lpf1"):
            idxs = by_block[block]
            assert len(idxs) == 3 and len(set(idxs)) == 1
            graphs = trace["graphs"][idxs[0]]
            for g in graphs:
                assert g is trace["graphs"][idxs[0]][graphs.index(g)]

    def test_lpf_block_zeroed_is_identity(self):
        cfg = micro_config()
        model = build_network(cfg, seed=4, dtype=np.float64)
        blk = model.lpfs[0]
        zero_model_part(blk.conv.named_parameters("z."))
        zero_model_part(blk.bn.named_parameters("z."))
        for gc, gbn in zip(blk.gconvs, blk.gbns):
            zero_model_part(gc.named_parameters("z."))
            zero_model_part(gbn.named_parameters("z."))
        img = np.random.default_rng(4).random((10, 10))
        trace = {}
        forward(model, img, graph_mode="infer", trace=trace)
        np.testing.assert_array_equal(
            trace["block_outputs"]["lpf1"], trace["block_outputs"]["hpf"]
        )

    def test_attention_only_variant_runs_and_trains(self):
        cfg = micro_config(attention_only=True, iters=3)
        model = build_network(cfg, seed=14)
        img = np.random.default_rng(15).random((10, 10))
        out = forward(model, img, graph_mode="infer")
        assert out.data.shape == (1, 10, 10, 1)
        images = synthetic_gallery(2, 24, seed=16)
        _, losses = train(model, images, cfg)
        assert len(losses) == 3 and all(np.isfinite(losses))

    def test_attention_only_gradients(self):
        from gcdn.ecc import graph_conv_layer_t, init_ecc
        from gcdn.graphs import build_graph_train, edge_labels

        rng = np.random.default_rng(17)
        feats = rng.standard_normal((4, 4, 3))
        g = edge_labels(feats, build_graph_train(feats, 2))
        params = init_ecc(3, 3, r=1, m=1, delta=5.0, seed=18, dtype=np.float64)
        x = Tensor(feats[None], requires_grad=True)
        tgt = rng.standard_normal((1, 4, 4, 3))

        def fn(x):
            out = graph_conv_layer_t(x, (1, 4, 4), g, params, attention_only=True)
            return mse(out, tgt)

        assert grad_check(fn, [x]) < 1e-6

    def test_rejects_tiny_images(self):
        model = build_network(micro_config(), seed=0)
        with pytest.raises(ValueError, match="3x3"):
            forward(model, np.zeros((2, 5)))

    def test_rejects_multichannel(self):
        model = build_network(micro_config(), seed=0)
        with pytest.raises(ValueError, match="channel"):
            forward(model, Tensor(np.zeros((1, 8, 8, 2), np.float32)))

    def test_micro_end_to_end_gradient(self):
        cfg = micro_config()
        model = build_network(cfg, seed=5, dtype=np.float64)
        rng = np.random.default_rng(5)
        noisy = rng.random((1, 8, 8, 1))
        clean = rng.random((1, 8, 8, 1))
        trace = {}
        forward(model, Tensor(noisy), graph_mode="train", bn_mode="train", trace=trace)
        fixed_graphs = trace["graphs"]
        x = Tensor(noisy, requires_grad=True)
        params = model.named_parameters()
        plist = [p for _, p in params]

        def fn(x, *plist):
            out = forward(
                model, x, graph_mode="train", bn_mode="train", graphs=fixed_graphs
            )
            return mse(out, clean)

        err = grad_check(fn, [x] + plist, max_coords_per_tensor=4, seed=0)
        assert err < 1e-4


class TestTraining:
    def test_lr_schedule_endpoints(self):
        cfg = micro_config(iters=100, lr_start=1e-4, lr_end=1e-5)
        assert lr_schedule(cfg, 0) == pytest.approx(1e-4)
        assert lr_schedule(cfg, 100) == pytest.approx(1e-5)
        assert lr_schedule(cfg, 50) == pytest.approx(np.sqrt(1e-4 * 1e-5))

    def test_deterministic_loss_trace(self):
        cfg = micro_config(iters=3)
        images = synthetic_gallery(3, 24, seed=9)
        m1 = build_network(cfg, seed=6)
        _, l1 = train(m1, images, cfg)
        m2 = build_network(cfg, seed=6)
        _, l2 = train(m2, images, cfg)
        assert l1 == l2
        assert len(l1) == 3

    def test_loss_decreases_on_smoke_run(self):
        cfg = micro_config(iters=200, patch=10, batch=2)
        images = synthetic_gallery(4, 32, seed=10)
        model = build_network(cfg, seed=7)
        _, losses = train(model, images, cfg)
        first = np.mean(losses[:50])
        last = np.mean(losses[-50:])
        assert last < first

    def test_divergence_reports_iteration_and_seed(self):
        cfg = micro_config(iters=2)
        images = [np.full((24, 24), np.nan)]
        model = build_network(cfg, seed=8)
        with pytest.raises(TrainingDiverged, match="iteration 0") as exc:
            train(model, images, cfg)
        assert exc.value.seed_key == (cfg.seed, 0)


class TestCheckpoint:
    def _trained(self, tmp_path):
        cfg = micro_config(iters=2)
        images = synthetic_gallery(2, 24, seed=11)
        model = build_network(cfg, seed=9)
        ckpt, _ = train(model, images, cfg)
        path = tmp_path / "model.gcdn"
        save_checkpoint(path, ckpt)
        return cfg, model, ckpt, path

    def test_roundtrip_byte_identical(self, tmp_path):
        cfg, model, ckpt, path = self._trained(tmp_path)
        loaded = load_checkpoint(path)
        assert loaded == ckpt
        path2 = tmp_path / "again.gcdn"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_denoise_identical_after_reload(self, tmp_path):
        cfg, model, ckpt, path = self._trained(tmp_path)
        loaded = load_checkpoint(path)
        img = np.random.default_rng(12).random((16, 16))
        a = denoise(ckpt, img)
        b = denoise(loaded, img)
        np.testing.assert_array_equal(a, b)

    def test_adam_state_roundtrip(self, tmp_path):
        cfg, model, ckpt, path = self._trained(tmp_path)
        loaded = load_checkpoint(path)
        model2 = model_from_checkpoint(loaded, dtype=np.float32)
        states = adam_from_checkpoint(loaded, model2)
        assert states is not None
        assert all(st.t == 2 for st in states.values())

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.gcdn"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_version_mismatch_rejected(self, tmp_path):
        cfg, model, ckpt, path = self._trained(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # bump version field
        p = tmp_path / "vers.gcdn"
        p.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(p)

    def test_magic_bytes_literal(self, tmp_path):
        cfg, model, ckpt, path = self._trained(tmp_path)
        assert path.read_bytes()[:4] == b"GCDN"


class TestDenoise:
    def test_tiled_matches_untiled(self):
        cfg = micro_config()
        model = build_network(cfg, seed=10, dtype=np.float64)
        rng = np.random.default_rng(13)
        img = rng.random((96, 96))
        full = denoise(model, img)
        tiled = denoise(model, img, tile=48)
        np.testing.assert_allclose(tiled, full, atol=1e-6)

    def test_identity_config_consistency(self):
        cfg = micro_config()
        model = build_network(cfg, seed=11, dtype=np.float64)
        ckpt = checkpoint_from_model(model)
        img = np.random.default_rng(14).random((12, 12))
        a = denoise(ckpt, img)
        b = denoise(ckpt, img)
        np.testing.assert_array_equal(a, b)
