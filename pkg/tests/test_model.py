import numpy as np
import pytest
import torch

from voxharm.errors import LabelError, ShapeError
from voxharm.nets import (
    AttentionBlock,
    ModelBundle,
    ScaleConfig,
    one_hot_label,
    volume_to_tensor,
)

TOY = ScaleConfig(input_shape=(16, 16, 8), n_scanners=2, s_dim=4, base_channels=4, zb_channels=4)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(TOY, seed=0)


def toy_input(seed=0, shape=(16, 16, 8)):
    rng = np.random.default_rng(seed)
    return volume_to_tensor(rng.random(shape).astype(np.float32))


class TestShapes:
    def test_brain_embedding_halves_each_axis(self, bundle):
        z = bundle.encode_brain(toy_input())
        assert tuple(z.shape) == (1, TOY.zb_channels, 8, 8, 4)

    def test_halving_rule_odd_dims(self):
        cfg = ScaleConfig(input_shape=(7, 9, 5), n_scanners=2, s_dim=4, base_channels=4, zb_channels=4)
        b = ModelBundle(cfg, seed=0)
        z = b.encode_brain(toy_input(shape=(7, 9, 5)))
        assert tuple(z.shape[2:]) == (4, 5, 3)  # ceil of half

    def test_fullscale_halving_arithmetic(self):
        # (182, 218, 182) halves to (91, 109, 91); checked on the config rule
        cfg = ScaleConfig(input_shape=(182, 218, 182), n_scanners=5, s_dim=16)
        assert cfg.half_shape == (91, 109, 91)

    def test_generate_round_trip_shape(self, bundle):
        x = toy_input(1)
        z_b = bundle.encode_brain(x)
        out = bundle.generate(z_b, torch.zeros(TOY.s_dim), one_hot_label(0, 2))
        assert out.shape == x.shape

    def test_shape_mismatch_raises(self, bundle):
        with pytest.raises(ShapeError):
            bundle.encode_brain(toy_input(shape=(8, 8, 8)))

    def test_generate_rejects_bad_latent(self, bundle):
        z_b = bundle.encode_brain(toy_input())
        with pytest.raises(ShapeError):
            bundle.generate(z_b, torch.zeros(TOY.s_dim + 1), one_hot_label(0, 2))


class TestScannerEncoder:
    def test_eps_zero_returns_mu(self, bundle):
        post = bundle.encode_scanner(toy_input(2), one_hot_label(0, 2), eps=torch.zeros(TOY.s_dim))
        torch.testing.assert_close(post.z_s, post.mu)

    def test_sigma_positive(self, bundle):
        post = bundle.encode_scanner(toy_input(3), one_hot_label(1, 2), eps=torch.zeros(TOY.s_dim))
        assert (post.sigma > 0).all()

    def test_reparameterization_identity(self, bundle):
        gen = torch.Generator().manual_seed(5)
        post = bundle.encode_scanner(toy_input(4), one_hot_label(0, 2), generator=gen)
        torch.testing.assert_close(post.z_s - post.mu, post.sigma * post.eps)

    def test_deterministic_with_fixed_eps(self, bundle):
        eps = torch.full((TOY.s_dim,), 0.3)
        a = bundle.encode_scanner(toy_input(6), one_hot_label(1, 2), eps=eps)
        b = bundle.encode_scanner(toy_input(6), one_hot_label(1, 2), eps=eps)
        torch.testing.assert_close(a.z_s, b.z_s)

    def test_null_label_accepted(self, bundle):
        post = bundle.encode_scanner(toy_input(7), one_hot_label(None, 2), eps=torch.zeros(TOY.s_dim))
        assert post.mu.shape == (1, TOY.s_dim)

    def test_bad_label_rejected(self, bundle):
        with pytest.raises(LabelError):
            bundle.encode_scanner(toy_input(8), torch.tensor([1.0, 1.0]), eps=torch.zeros(TOY.s_dim))
        with pytest.raises(LabelError):
            bundle.encode_scanner(toy_input(8), torch.tensor([1.0, 0.0, 0.0]), eps=torch.zeros(TOY.s_dim))

    def test_default_s_dim_is_16(self):
        assert ScaleConfig().s_dim == 16


class TestDeterminism:
    def test_encode_brain_repeatable(self, bundle):
        x = toy_input(9)
        torch.testing.assert_close(bundle.encode_brain(x), bundle.encode_brain(x))

    def test_untrained_generator_repeatable(self, bundle):
        z_b = bundle.encode_brain(toy_input(10))
        z_s = torch.linspace(-1, 1, TOY.s_dim)
        a = bundle.generate(z_b, z_s, one_hot_label(1, 2))
        b = bundle.generate(z_b, z_s, one_hot_label(1, 2))
        torch.testing.assert_close(a, b)

    def test_same_seed_same_parameters(self):
        b1 = ModelBundle(TOY, seed=123)
        b2 = ModelBundle(TOY, seed=123)
        for (n1, p1), (_, p2) in zip(
            sorted(b1.generator.named_parameters()), sorted(b2.generator.named_parameters())
        ):
            torch.testing.assert_close(p1, p2, msg=n1)


class TestOutputs:
    def test_generator_outputs_bounded(self, bundle):
        z_b = bundle.encode_brain(toy_input(11))
        for seed in range(5):
            gen = torch.Generator().manual_seed(seed)
            z_s = torch.randn(TOY.s_dim, generator=gen)
            out = bundle.generate(z_b, z_s, one_hot_label(0, 2))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_brain_disc_probabilities_sum_to_one(self, bundle):
        z_b = bundle.encode_brain(toy_input(12))
        probs = bundle.discriminate_brain(z_b)
        assert abs(float(probs.sum()) - 1.0) < 1e-6

    def test_brain_disc_near_uniform_at_init(self):
        # near-zero head init keeps untrained logits close to symmetric
        b = ModelBundle(TOY, seed=7)
        probs = b.discriminate_brain(b.encode_brain(toy_input(13)))
        np.testing.assert_allclose(probs.detach().numpy(), [[0.5, 0.5]], atol=0.15)

    def test_brain_disc_batch_permutation(self, bundle):
        z1 = bundle.encode_brain(toy_input(14))
        z2 = bundle.encode_brain(toy_input(15))
        batch = torch.cat([z1, z2])
        flipped = torch.cat([z2, z1])
        p = bundle.discriminate_brain(batch)
        q = bundle.discriminate_brain(flipped)
        torch.testing.assert_close(p, q.flip(0))

    def test_scanner_disc_contract(self, bundle):
        score, label = bundle.discriminate_scanner(toy_input(16))
        assert 0.0 < float(score) < 1.0
        assert abs(float(label.sum()) - 1.0) < 1e-6
        score2, label2 = bundle.discriminate_scanner(toy_input(16))
        torch.testing.assert_close(score, score2)
        torch.testing.assert_close(label, label2)

    def test_forward_passes_finite(self, bundle):
        for seed in range(5):
            x = toy_input(seed + 100)
            z_b = bundle.encode_brain(x)
            post = bundle.encode_scanner(x, one_hot_label(0, 2), eps=torch.zeros(TOY.s_dim))
            out = bundle.generate(z_b, post.z_s, one_hot_label(1, 2))
            score, label = bundle.discriminate_scanner(out)
            assert torch.isfinite(z_b).all() and torch.isfinite(out).all()
            assert torch.isfinite(score).all() and torch.isfinite(label).all()


class TestAttention:
    def test_shape_preserved_and_gated(self):
        torch.manual_seed(0)
        block = AttentionBlock(6)
        x = torch.randn(2, 6, 4, 4, 4)
        out = block(x)
        assert out.shape == x.shape
        assert (out.abs() <= x.abs() + 1e-6).all()  # gates in (0,1) shrink magnitudes

    def test_forced_identity(self):
        block = AttentionBlock(3)
        x = torch.randn(1, 3, 4, 4, 4)
        torch.testing.assert_close(block(x, force_identity=True), x)

    def test_zero_input_zero_output(self):
        block = AttentionBlock(3)
        x = torch.zeros(1, 3, 4, 4, 4)
        torch.testing.assert_close(block(x), x)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, bundle):
        bundle.iteration = 17
        bundle.scanner_ids = ["a", "b"]
        bundle.reference_bank = {"a": torch.randn(TOY.s_dim)}
        path = tmp_path / "bundle.pt"
        bundle.save(path)
        loaded = ModelBundle.load(path)
        assert loaded.iteration == 17
        assert loaded.scanner_ids == ["a", "b"]
        torch.testing.assert_close(loaded.reference_bank["a"], bundle.reference_bank["a"])
        for name, module in bundle.modules().items():
            for key, value in module.state_dict().items():
                assert torch.equal(loaded.modules()[name].state_dict()[key], value), (name, key)
        x = toy_input(20)
        torch.testing.assert_close(loaded.encode_brain(x), bundle.encode_brain(x))


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        cfg = ScaleConfig(input_shape=(8, 8, 8), n_scanners=2, s_dim=4, base_channels=4, zb_channels=4)
        bundle = ModelBundle(cfg, seed=3).double()
        rng = np.random.default_rng(0)
        x = volume_to_tensor(rng.random((8, 8, 8)), dtype=torch.float64)
        label = one_hot_label(0, 2).double()
        eps = torch.zeros(4, dtype=torch.float64)

        def scalar_loss():
            z_b = bundle.encode_brain(x)
            post = bundle.encode_scanner(x, label, eps=eps)
            out = bundle.generate(z_b, post.z_s, label)
            score, probs = bundle.discriminate_scanner(out)
            p_b = bundle.discriminate_brain(z_b)
            return out.mean() + score.mean() + probs[:, 0].mean() + p_b[:, 0].mean() + post.mu.pow(2).mean()

        loss = scalar_loss()
        params = [p for m in bundle.modules().values() for p in m.parameters()]
        grads = torch.autograd.grad(loss, params, allow_unused=True)

        checked = 0
        h = 1e-6
        for p, g in zip(params, grads):
            if g is None:
                continue
            flat = p.detach().view(-1)
            gflat = g.view(-1)
            # probe a few coordinates of every parameter tensor
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                up = scalar_loss().item()
                with torch.no_grad():
                    flat[idx] = orig - h
                down = scalar_loss().item()
                with torch.no_grad():
                    flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = gflat[idx].item()
                # the floor absorbs central-difference roundoff (~1e-10 absolute)
                denom = max(abs(numeric), abs(analytic), 1e-6)
                assert abs(numeric - analytic) / denom < 1e-3, (numeric, analytic)
                checked += 1
        assert checked > 50
