import numpy as np
import pytest

from robustlab import contrastive, nn
from robustlab import tensor as T
from robustlab.errors import ConfigurationError, ContractViolation


class TestNtXent:
    def test_identical_embeddings_log7(self):
        batch = contrastive.EmbeddingBatch(T.Tensor(np.ones((8, 3))),
                                           contrastive.adjacent_pairing(8), tau=1.0)
        assert contrastive.nt_xent(batch).item() == pytest.approx(np.log(7), abs=1e-9)

    def test_orthogonal_pairs(self):
        e = np.zeros((4, 2))
        e[0] = e[1] = [1.0, 0.0]
        e[2] = e[3] = [0.0, 1.0]
        batch = contrastive.EmbeddingBatch(T.Tensor(e),
                                           contrastive.adjacent_pairing(4), tau=1.0)
        expected = -np.log(np.e / (np.e + 2))
        assert contrastive.nt_xent(batch).item() == pytest.approx(expected, abs=1e-9)

    def test_temperature_halves_logits(self, rng):
        e = T.Tensor(rng.normal(size=(6, 4)))
        s1 = contrastive.scaled_similarities(e, tau=1.0).data
        s2 = contrastive.scaled_similarities(e, tau=2.0).data
        np.testing.assert_allclose(s2, s1 / 2.0, atol=1e-15)

    def test_zero_embedding_rejected(self):
        e = np.ones((4, 3))
        e[2] = 0.0
        batch = contrastive.EmbeddingBatch(T.Tensor(e),
                                           contrastive.adjacent_pairing(4))
        with pytest.raises(ContractViolation):
            contrastive.nt_xent(batch)

    def test_rescaling_one_embedding_invariant(self, rng):
        e = rng.normal(size=(6, 5))
        base = contrastive.nt_xent(contrastive.EmbeddingBatch(
            T.Tensor(e), contrastive.adjacent_pairing(6), tau=0.5)).item()
        e2 = e.copy()
        e2[3] *= 4.2
        scaled = contrastive.nt_xent(contrastive.EmbeddingBatch(
            T.Tensor(e2), contrastive.adjacent_pairing(6), tau=0.5)).item()
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_loss_strictly_positive(self, rng):
        for _ in range(10):
            e = rng.normal(size=(8, 4))
            loss = contrastive.nt_xent(contrastive.EmbeddingBatch(
                T.Tensor(e), contrastive.adjacent_pairing(8), tau=0.5)).item()
            assert loss > 0.0

    def test_permutation_invariant(self, rng):
        e = rng.normal(size=(8, 4))
        pairing = contrastive.adjacent_pairing(8)
        base = contrastive.nt_xent(
            contrastive.EmbeddingBatch(T.Tensor(e), pairing, tau=0.5)).item()
        perm = rng.permutation(8)
        inverse = np.argsort(perm)
        permuted_pairing = inverse[pairing[perm]]
        permuted = contrastive.nt_xent(contrastive.EmbeddingBatch(
            T.Tensor(e[perm]), permuted_pairing, tau=0.5)).item()
        assert permuted == pytest.approx(base, rel=1e-10)

    def test_gradient_finite_difference(self, rng):
        e0 = rng.normal(size=(6, 4))
        pairing = contrastive.adjacent_pairing(6)

        def f(e):
            return contrastive.nt_xent(contrastive.EmbeddingBatch(e, pairing, tau=0.5))

        report = T.finite_difference_check(f, T.Tensor(e0))
        assert report.passed, str(report)

    def test_pairing_validation(self):
        with pytest.raises(ConfigurationError):
            contrastive.EmbeddingBatch(T.Tensor(np.ones((4, 2))),
                                       np.array([0, 1, 3, 2]))  # fixed point
        with pytest.raises(ConfigurationError):
            contrastive.EmbeddingBatch(T.Tensor(np.ones((2, 2))),
                                       np.array([1, 0]))        # N < 2


class TestAugment:
    def test_identity_config_is_noop(self, rng):
        img = rng.uniform(0.1, 0.9, size=(16, 16))
        out = contrastive.augment(img, contrastive.IDENTITY_AUGMENT,
                                  np.random.default_rng(5))
        np.testing.assert_array_equal(out, img)

    def test_deterministic_given_rng_state(self, rng):
        img = rng.uniform(size=(1, 16, 16))
        cfg = contrastive.AugmentConfig()
        a = contrastive.augment(img, cfg, np.random.default_rng(42))
        b = contrastive.augment(img, cfg, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_output_in_unit_range_under_extreme_jitter(self, rng):
        img = rng.uniform(size=(16, 16))
        cfg = contrastive.AugmentConfig(crop_scale=(0.5, 1.0), flip_prob=1.0,
                                        brightness=0.9, contrast=0.9,
                                        noise_sigma=0.3)
        gen = np.random.default_rng(3)
        for _ in range(20):
            out = contrastive.augment(img, cfg, gen)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ConfigurationError):
            contrastive.AugmentConfig(crop_scale=(1.2, 1.5))
        with pytest.raises(ConfigurationError):
            contrastive.AugmentConfig(flip_prob=1.5)


class TestPretrain:
    def _encoder(self, seed=0):
        return nn.build_model(nn.encoder_spec("maxpool"), seed=seed,
                              input_shape=(1, 16, 16), dtype=np.float64)

    def _images(self, rng, n=12, size=16):
        return rng.uniform(0.2, 0.8, size=(n, 1, size, size))

    def test_zero_steps_leaves_encoder(self, rng):
        enc = self._encoder()
        before = {k: v.data.copy() for k, v in enc.params.items()}
        cfg = contrastive.PretrainConfig(steps=0, batch_n=4, seed=0)
        enc, losses = contrastive.pretrain(enc, self._images(rng), cfg)
        assert losses == []
        for k in before:
            np.testing.assert_array_equal(enc.params[k].data, before[k])

    def test_initial_loss_finite_positive(self, rng):
        enc = self._encoder()
        cfg = contrastive.PretrainConfig(steps=2, batch_n=8, tau=0.5, seed=0)
        _, losses = contrastive.pretrain(enc, self._images(rng, n=16), cfg)
        assert len(losses) == 2
        assert all(np.isfinite(v) and v > 0 for v in losses)

    def test_batch_too_small_rejected(self):
        with pytest.raises(ConfigurationError):
            contrastive.PretrainConfig(steps=1, batch_n=1)

    def test_deterministic(self, rng):
        images = self._images(rng)
        results = []
        for _ in range(2):
            enc = self._encoder(seed=4)
            cfg = contrastive.PretrainConfig(steps=3, batch_n=4, seed=9)
            _, losses = contrastive.pretrain(enc, images, cfg)
            results.append((losses, {k: v.data.copy() for k, v in enc.params.items()}))
        assert results[0][0] == results[1][0]
        for k in results[0][1]:
            np.testing.assert_array_equal(results[0][1][k], results[1][1][k])

    def test_marks_provenance(self, rng):
        enc = self._encoder()
        cfg = contrastive.PretrainConfig(steps=1, batch_n=4, seed=0)
        enc, _ = contrastive.pretrain(enc, self._images(rng), cfg)
        assert enc.metadata["provenance"] == "pretrained: contrastive"

    def test_positive_pairs_more_similar_than_negatives_after_pretraining(self):
        from robustlab import data
        from robustlab.tensor import Tensor

        ds = data.generate_synthetic(20, 16, seed=8)
        enc = self._encoder(seed=3)
        cfg = contrastive.PretrainConfig(steps=60, batch_n=8,
                                         learning_rate=1e-3, seed=1)
        enc, losses = contrastive.pretrain(enc, ds.images[:24], cfg)
        assert losses[-1] < losses[0]

        # held-out images: two augmented views each, compare cosine similarities
        held = ds.images[24:36]
        gen = np.random.default_rng(4)
        views = []
        for img in held:
            views.append(contrastive.augment(img, cfg.augment, gen))
            views.append(contrastive.augment(img, cfg.augment, gen))
        feats = nn.forward(enc, Tensor(np.stack(views))).data
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        sims = feats @ feats.T
        two_n = len(views)
        pos, neg = [], []
        for i in range(0, two_n, 2):
            pos.append(sims[i, i + 1])
            for j in range(two_n):
                if j not in (i, i + 1):
                    neg.append(sims[i, j])
        assert np.mean(pos) > np.mean(neg)


class TestTransfer:
    def test_backbone_copied_head_fresh(self, rng):
        enc = nn.build_model(nn.encoder_spec("maxpool"), seed=2,
                             input_shape=(1, 16, 16))
        spec = nn.default_classifier_spec("maxpool")
        model = contrastive.transfer(enc, spec, seed=7)
        for name, p in enc.params.items():
            np.testing.assert_array_equal(model.params[name].data, p.data)
        scratch = nn.build_model(spec, seed=7, input_shape=(1, 16, 16))
        assert not np.array_equal(model.params["conv1.weight"].data,
                                  scratch.params["conv1.weight"].data)

    def test_round_trip_through_checkpoint(self, tmp_path, rng):
        enc = nn.build_model(nn.encoder_spec("maxpool"), seed=2,
                             input_shape=(1, 16, 16))
        model = contrastive.transfer(enc, nn.default_classifier_spec("maxpool"),
                                     seed=7)
        x = T.Tensor(rng.uniform(size=(2, 1, 16, 16)))
        before = nn.forward(model, x).data
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(model, path)
        np.testing.assert_array_equal(nn.forward(nn.load_checkpoint(path), x).data,
                                      before)

    def test_fresh_head_zeroed_gives_uniform_logits(self, rng):
        enc = nn.build_model(nn.encoder_spec("maxpool"), seed=2,
                             input_shape=(1, 16, 16))
        model = contrastive.transfer(enc, nn.default_classifier_spec("maxpool"),
                                     seed=7)
        model.params["dense1.weight"].data[:] = 0.0
        model.params["dense1.bias"].data[:] = 0.0
        out = nn.forward(model, T.Tensor(rng.uniform(size=(2, 1, 16, 16))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_mismatched_spec_rejected(self):
        enc = nn.build_model(nn.encoder_spec("maxpool"), seed=2,
                             input_shape=(1, 16, 16))
        with pytest.raises(ConfigurationError):
            contrastive.transfer(enc, nn.default_classifier_spec("dropmax"), seed=7)
