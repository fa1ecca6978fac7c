import math

import numpy as np
import pytest

from unlearnbench import autodiff as ad
from unlearnbench import data, encoder


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def loss_from_cosines(cos_rows, labels, s, m_cos):
    """CosFace through the public path, with a head chosen to realize the given cosines."""
    cos_rows = np.asarray(cos_rows, dtype=float)
    n, k = cos_rows.shape
    # embeddings are basis vectors e_i; head column j holds the desired cosines (plus padding to unit norm)
    emb = np.eye(n, n + k)
    head = np.zeros((k, n + k))
    head[:, :n] = cos_rows.T
    head[np.arange(k), n + np.arange(k)] = np.sqrt(np.maximum(0.0, 1 - (cos_rows.T ** 2).sum(axis=1)))
    return encoder.cosface_from_embeddings(ad.Tensor(emb), ad.Tensor(head), labels, s, m_cos).item()


class TestCosFace:
    def test_closed_form_s1(self):
        assert loss_from_cosines([[1.0, 0.0]], [0], s=1.0, m_cos=0.0) == pytest.approx(0.31326168751822286, abs=1e-9)

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_equal_cosines_give_log_k(self, k):
        assert loss_from_cosines([[0.3] * k], [0], s=64.0, m_cos=0.0) == pytest.approx(math.log(k), abs=1e-9)

    def test_margin_closed_form(self):
        expected = math.log1p(math.exp(25.6))
        assert loss_from_cosines([[0.2, 0.2]], [1], s=64.0, m_cos=0.4) == pytest.approx(expected, abs=1e-9)

    def test_head_rows_renormalized(self, rng):
        emb = ad.Tensor(unit(rng.standard_normal((4, 3))))
        head = rng.standard_normal((5, 3))
        a = encoder.cosface_from_embeddings(emb, ad.Tensor(head), [0, 1, 2, 3], 16.0, 0.2).item()
        b = encoder.cosface_from_embeddings(emb, ad.Tensor(head * 7.5), [0, 1, 2, 3], 16.0, 0.2).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_independent_cross_entropy(self, rng):
        for _ in range(50):
            n, k, d = rng.integers(1, 6), rng.integers(2, 8), rng.integers(2, 6)
            e, w = unit(rng.standard_normal((n, d))), rng.standard_normal((k, d))
            y = rng.integers(0, k, size=n)
            s = float(rng.uniform(1, 64))
            logits = s * (e @ unit(w).T)
            ref = np.mean([-(logits[i, y[i]] - np.log(np.sum(np.exp(logits[i] - logits[i].max()))) - logits[i].max())
                           for i in range(n)])
            got = encoder.cosface_from_embeddings(ad.Tensor(e), ad.Tensor(w), y, s, 0.0).item()
            assert abs(got - ref) < 1e-10

    def test_margin_is_monotone(self, rng):
        e, w = unit(rng.standard_normal((6, 4))), rng.standard_normal((5, 4))
        y = rng.integers(0, 5, size=6)
        vals = [encoder.cosface_from_embeddings(ad.Tensor(e), ad.Tensor(w), y, 8.0, m).item()
                for m in np.linspace(0, 0.8, 9)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_label_out_of_range(self, rng):
        with pytest.raises(IndexError):
            encoder.cosface_from_embeddings(ad.Tensor(unit(rng.standard_normal((2, 3)))),
                                            ad.Tensor(rng.standard_normal((3, 3))), [0, 3], 64.0, 0.4)

    def test_gradient_through_model(self, rng):
        model = encoder.init_model(5, 4, d=3, hidden=(6, 6), s=16.0, seed=1)
        x = rng.standard_normal((6, 5))
        y = rng.integers(0, 4, size=6)
        for name in ("W0", "b1", "head"):
            def f(t, name=name):
                params = encoder.as_tensors(model, requires_grad=False)
                params[name] = t
                return encoder.cosface_loss(model, x, y, params)
            assert ad.grad_check(f, model.params[name]) < 1e-4


class TestEmbed:
    def test_unit_rows_and_determinism(self, rng):
        model = encoder.init_model(7, 3, d=5, hidden=(8,), seed=2)
        x = rng.standard_normal((10, 7)) * 5
        e1, e2 = encoder.embed(model, x), encoder.embed(model, x)
        np.testing.assert_allclose(np.linalg.norm(e1, axis=1), 1.0, atol=1e-9)
        assert e1.tobytes() == e2.tobytes()

    def test_dimension_mismatch(self, rng):
        model = encoder.init_model(7, 3, d=5, hidden=(8,), seed=2)
        with pytest.raises(ad.ShapeError):
            encoder.embed(model, rng.standard_normal((2, 6)))

    def test_architecture(self):
        model = encoder.init_model(16, 100)
        assert [model.params[f"W{i}"].shape for i in range(3)] == [(128, 16), (128, 128), (32, 128)]
        assert model.params["head"].shape == (100, 32)
        assert model.s == 64.0 and model.m_cos == 0.4


class TestTraining:
    def test_lr_zero_leaves_parameters(self, tiny_world):
        ds, plan, _ = tiny_world
        model = encoder.init_model(6, 12, d=8, hidden=(16, 16), seed=0)
        trained, curve = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train],
                                       encoder.TrainConfig(lr=0.0, epochs=3, batch_size=1000))
        for k in model.params:
            assert trained.params[k].tobytes() == model.params[k].tobytes()
        assert curve[0] == curve[1] == curve[2]

    def test_curve_length_and_determinism(self, tiny_world):
        ds, plan, _ = tiny_world
        model = encoder.init_model(6, 12, d=8, hidden=(16, 16), seed=0)
        cfg = encoder.TrainConfig(lr=0.01, epochs=4, batch_size=16, seed=5)
        a, ca = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train], cfg)
        b, cb = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train], cfg)
        assert len(ca) == 4 and ca == cb
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_divergence_is_reported(self, tiny_world):
        ds, plan, _ = tiny_world
        model = encoder.init_model(6, 12, d=8, hidden=(16, 16), seed=0)
        with np.errstate(all="ignore"), pytest.raises(encoder.TrainingDiverged):
            encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train],
                          encoder.TrainConfig(lr=1e12, epochs=40, batch_size=16, lr_schedule="constant"))

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            encoder.train(encoder.init_model(2, 2, d=2, hidden=(2,)), np.zeros((0, 2)), np.zeros(0, dtype=int),
                          encoder.TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            encoder.TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            encoder.TrainConfig(lr_schedule="cosine")

    def test_flip_augment_changes_training(self, tiny_world):
        ds, plan, _ = tiny_world
        model = encoder.init_model(6, 12, d=8, hidden=(16, 16), seed=0)
        a, _ = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train],
                             encoder.TrainConfig(lr=0.01, epochs=2, batch_size=16))
        b, _ = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train],
                             encoder.TrainConfig(lr=0.01, epochs=2, batch_size=16, flip_augment=True))
        assert not np.array_equal(a.params["W0"], b.params["W0"])

    def test_sgd_masks_and_frozen(self):
        params = {"a": np.ones(4), "b": np.ones(2)}
        grads = {"a": np.ones(4), "b": np.ones(2)}
        encoder.SGD(momentum=0.0, weight_decay=0.0).step(params, grads, 0.5, masks={"a": np.array([1, 0, 1, 0.]),
                                                                                     "b": np.ones(2)}, frozen=("b",))
        np.testing.assert_array_equal(params["a"], [0.5, 1, 0.5, 1])
        np.testing.assert_array_equal(params["b"], [1, 1])


class TestReferenceModel:
    def test_loss_drops_tenfold(self, reference_world):
        _, _, _, curve = reference_world
        assert curve[-1] * 10 <= curve[0]

    def test_same_identity_pairs_are_close(self, reference_world):
        ds, plan, model, _ = reference_world
        emb = encoder.embed(model, ds.inputs[plan.retain_test])
        labels = ds.labels[plan.retain_test]
        cos = emb @ emb.T
        same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
        assert cos[same].mean() > 0.6

    def test_forget_and_distractor_centroids_do_not_leak(self, reference_world):
        ds, plan, model, _ = reference_world
        emb = encoder.embed(model, ds.inputs)
        mask = np.isin(ds.labels, plan.forget_identities)
        _, fc = data.identity_centroids(emb[mask], ds.labels[mask])
        _, dc = data.identity_centroids(encoder.embed(model, plan.distractor_inputs), plan.distractor_labels)
        rep = data.leakage_check(fc, dc, threshold=0.8)
        assert rep.max_cosine < 0.8 and rep.clean


class TestCentroidClassify:
    def test_lone_train_point(self):
        train = unit([[1, 0], [0, 1]])
        assert encoder.centroid_classify(train, np.array([4, 9]), train[1:]).tolist() == [9]

    def test_antipodal(self):
        train = unit([[1, 0], [-1, 0]])
        assert encoder.centroid_classify(train, np.array([0, 1]), unit([[-0.9, 0.3]])).tolist() == [1]

    def test_tie_goes_to_lowest_class(self):
        train = unit([[1, 0], [0, 1]])
        assert encoder.centroid_classify(train, np.array([5, 2]), unit([[1, 1]])).tolist() == [2]

    def test_empty_class(self):
        with pytest.raises(ValueError):
            encoder.centroid_classify(unit([[1, 0]]), np.array([0]), unit([[1, 0]]), classes=np.array([0, 1]))

    def test_brute_force(self, rng):
        train = unit(rng.standard_normal((15, 3)))
        labels = np.repeat(np.arange(5), 3)
        test = unit(rng.standard_normal((40, 3)))
        expected = []
        for q in test:
            best, best_c = -np.inf, None
            for c in range(5):
                m = sum(train[i] for i in range(15) if labels[i] == c)
                cos = float(q @ m) / float(np.linalg.norm(m))
                if cos > best:
                    best, best_c = cos, c
            expected.append(best_c)
        assert encoder.centroid_classify(train, labels, test).tolist() == expected


class TestSnapshot:
    def test_round_trip(self, tmp_path, tiny_world):
        _, _, model = tiny_world
        path = encoder.save_model(model, tmp_path / "m.bin", {"note": "x"})
        back, meta = encoder.load_model(path)
        assert meta == {"note": "x"}
        assert back.arch() == model.arch()
        for k in model.params:
            assert back.params[k].tobytes() == model.params[k].tobytes()
        assert path.read_bytes() == encoder.save_model(back, tmp_path / "m2.bin", {"note": "x"}).read_bytes()
