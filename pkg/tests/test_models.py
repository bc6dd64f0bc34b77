import json

import numpy as np
import pytest

from csvae import diffmath as dm
from csvae import models


def tiny_arch(latent=4):
    return models.ArchSpec(
        "tiny8", (1, 8, 8),
        (models.Conv(1, 2, 3, 2), models.BatchNorm(2), models.Relu(), models.Flatten(),
         models.Linear(18, 8), models.BatchNorm(8), models.Relu()),
        (models.Linear(latent, 8), models.BatchNorm(8), models.Relu(),
         models.Linear(8, 18), models.BatchNorm(18), models.Relu(),
         models.Unflatten((2, 3, 3)), models.ConvT(2, 1, 4, 2), models.Sigmoid()),
        latent,
    )


class TestPresets:
    # flatten size and the spatial size after every conv, per preset
    @pytest.mark.parametrize(
        "name,latent,flatten,conv_sizes",
        [
            ("fashion_mnist", 30, 2048, [26, 12, 10, 4]),
            ("cifar10", 30, 6400, [30, 14, 12, 5]),
            ("gray244", 30, 10368, [81, 27, 9]),
            ("gray244", 10, 10368, [81, 27, 9]),
        ],
    )
    def test_encoder_audit(self, name, latent, flatten, conv_sizes):
        arch = models.preset(name, latent)
        shapes = arch.encoder_shapes()
        got_conv = [
            s[1]
            for layer, s in zip(arch.encoder_layers, shapes)
            if isinstance(layer, models.Conv)
        ]
        assert got_conv == conv_sizes
        flat = [s[0] for layer, s in zip(arch.encoder_layers, shapes)
                if isinstance(layer, models.Flatten)]
        assert flat == [flatten]
        assert arch.mu_head.out_features == latent
        assert arch.log_sigma_head.out_features == latent

    @pytest.mark.parametrize("name", models.PRESET_NAMES)
    def test_decoder_returns_to_input_shape(self, name):
        arch = models.preset(name, 30)
        assert arch.decoder_shapes()[-1] == arch.input_shape

    def test_cifar_decoder_final_layer_grows_29_to_32(self):
        arch = models.preset("cifar10", 30)
        last_conv = [l for l in arch.decoder_layers if isinstance(l, models.ConvT)][-1]
        assert (last_conv.kernel, last_conv.stride) == (4, 1)
        conv_sizes = [
            s[1]
            for layer, s in zip(arch.decoder_layers, arch.decoder_shapes())
            if isinstance(layer, models.ConvT)
        ]
        assert conv_sizes[-2:] == [29, 32]

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            models.preset("mnist")

    def test_inconsistent_arch_rejected(self):
        with pytest.raises(dm.ShapeError):
            models.ArchSpec(
                "broken", (1, 8, 8),
                (models.Conv(1, 2, 3, 2), models.Flatten(), models.Linear(10, 4)),
                (models.Linear(4, 64), models.Unflatten((1, 8, 8))),
                4,
            )

    def test_arch_json_round_trip(self):
        arch = models.preset("fashion_mnist", 30)
        again = models.arch_from_json(json.loads(json.dumps(models.arch_to_json(arch))))
        assert again == arch


class TestPresetForward:
    def test_fashion_batch_encodes_to_latent_30(self):
        model = models.build_model(models.preset("fashion_mnist", 30), seed=0).eval()
        x = np.random.default_rng(0).random((16, 1, 28, 28), dtype=np.float32)
        codes = models.encode(model, x)
        assert len(codes) == 16 and codes[0].mu.shape == (30,)

    def test_gray244_decode_output_shape(self):
        model = models.build_model(models.preset("gray244", 10), seed=0).eval()
        out = models.decode(model, np.zeros((1, 10), dtype=np.float32))
        assert out.shape == (1, 1, 244, 244)
        assert np.all(out > 0) and np.all(out < 1)


class TestEncodeDecode:
    def test_encode_shapes(self):
        model = models.build_model(tiny_arch(), seed=0).eval()
        x = np.random.default_rng(0).random((5, 1, 8, 8), dtype=np.float32)
        codes = models.encode(model, x)
        assert len(codes) == 5
        assert codes[0].mu.shape == (4,) and codes[0].log_sigma.shape == (4,)

    def test_encode_shape_mismatch(self):
        model = models.build_model(tiny_arch(), seed=0)
        with pytest.raises(dm.ShapeError):
            models.encode(model, np.zeros((2, 1, 9, 9), dtype=np.float32))

    def test_zeroed_heads_give_bias_outputs(self):
        model = models.build_model(tiny_arch(), seed=0).eval()
        for name, p in model.parameters().items():
            if "head" in name:
                p.data[...] = 0.0
        model._mu_head.bias.data[...] = 0.25
        model._log_sigma_head.bias.data[...] = -0.5
        x = np.random.default_rng(1).random((3, 1, 8, 8), dtype=np.float32)
        codes = models.encode(model, x)
        for code in codes:
            assert np.allclose(code.mu, 0.25)
            assert np.allclose(code.log_sigma, -0.5)

    def test_eval_encode_deterministic_across_calls(self):
        model = models.build_model(tiny_arch(), seed=0).eval()
        x = np.random.default_rng(2).random((4, 1, 8, 8), dtype=np.float32)
        a = models.encode(model, x)
        b = models.encode(model, x)
        assert all(np.array_equal(c1.mu, c2.mu) for c1, c2 in zip(a, b))

    def test_eval_encode_batch_composition_independent(self):
        model = models.build_model(tiny_arch(), seed=3).eval()
        x = np.random.default_rng(3).random((6, 1, 8, 8), dtype=np.float32)
        full = models.encode(model, x)
        solo = models.encode(model, x[2:3])
        assert np.allclose(full[2].mu, solo[0].mu, atol=1e-6)

    def test_decode_output_shape_and_range(self):
        model = models.build_model(tiny_arch(), seed=0).eval()
        z = np.random.default_rng(4).standard_normal((7, 4)).astype(np.float32)
        out = models.decode(model, z)
        assert out.shape == (7, 1, 8, 8)
        assert np.all(out > 0) and np.all(out < 1)

    def test_decode_latent_dim_mismatch(self):
        model = models.build_model(tiny_arch(), seed=0)
        with pytest.raises(dm.ShapeError):
            models.decode(model, np.zeros((2, 9), dtype=np.float32))

    def test_train_mode_forward_reproducible(self):
        x = np.random.default_rng(5).random((4, 1, 8, 8), dtype=np.float32)
        outs = []
        for _ in range(2):
            model = models.build_model(tiny_arch(), seed=9)
            mu, _ = model.encode_tensors(dm.Tensor(x))
            outs.append(mu.data.copy())
        assert np.array_equal(outs[0], outs[1])


class TestReparameterize:
    def test_zero_epsilon_returns_mu(self):
        code = models.LatentCode(np.array([1.0, -2.0]), np.array([0.3, 0.1]))
        assert np.array_equal(models.reparameterize(code, np.zeros(2)), code.mu)

    def test_unit_sigma_adds_epsilon(self):
        code = models.LatentCode(np.array([1.0, -2.0]), np.zeros(2))
        eps = np.array([0.5, 0.25])
        assert np.allclose(models.reparameterize(code, eps), code.mu + eps)

    def test_epsilon_shape_checked(self):
        code = models.LatentCode(np.zeros(3), np.zeros(3))
        with pytest.raises(dm.ShapeError):
            models.reparameterize(code, np.zeros(4))

    def test_monte_carlo_moments(self):
        # empirical mean/std over many draws matches (mu, sigma) within 3 SE
        rng = np.random.default_rng(6)
        mu = np.array([0.7, -1.2, 0.0])
        log_sigma = np.array([0.2, -0.4, 0.9])
        sigma = np.exp(log_sigma)
        n = 100_000
        draws = np.stack([
            models.reparameterize(models.LatentCode(mu, log_sigma), rng.standard_normal(3))
            for _ in range(n)
        ])
        se_mean = sigma / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * se_mean)
        se_std = sigma / np.sqrt(2 * (n - 1))
        assert np.all(np.abs(draws.std(axis=0, ddof=1) - sigma) < 3 * se_std)


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        model = models.build_model(tiny_arch(), seed=1).eval()
        ckpt = models.Checkpoint(tiny_arch(), models.snapshot_tensors(model),
                                 config={"method": "vae"}, seed=11)
        models.save_checkpoint(ckpt, tmp_path)
        loaded = models.load_checkpoint(tmp_path)
        assert loaded.seed == 11 and loaded.config == {"method": "vae"}
        for name, arr in ckpt.tensors.items():
            assert np.array_equal(loaded.tensors[name], arr.astype(np.float32))
        x = np.random.default_rng(7).random((3, 1, 8, 8), dtype=np.float32)
        a = models.encode(model, x)
        b = models.encode(models.model_from_checkpoint(loaded).eval(), x)
        assert all(np.array_equal(c1.mu, c2.mu) for c1, c2 in zip(a, b))

    def test_digest_stable_and_sensitive(self, tmp_path):
        model = models.build_model(tiny_arch(), seed=1)
        ckpt = models.Checkpoint(tiny_arch(), models.snapshot_tensors(model), seed=0)
        d1 = models.checkpoint_digest(ckpt)
        models.save_checkpoint(ckpt, tmp_path)
        d2 = models.checkpoint_digest(models.load_checkpoint(tmp_path))
        assert d1 == d2
        ckpt.tensors["mu_head.bias"][0] += 1.0
        assert models.checkpoint_digest(ckpt) != d1

    def test_running_stats_round_trip(self, tmp_path):
        model = models.build_model(tiny_arch(), seed=2)
        x = dm.Tensor(np.random.default_rng(8).random((6, 1, 8, 8), dtype=np.float32))
        model.encode_tensors(x)  # train mode: updates running stats
        ckpt = models.Checkpoint(tiny_arch(), models.snapshot_tensors(model), seed=0)
        models.save_checkpoint(ckpt, tmp_path)
        restored = models.model_from_checkpoint(models.load_checkpoint(tmp_path))
        for name, buf in model.buffers().items():
            assert np.allclose(restored.buffers()[name], buf.astype(np.float32))
