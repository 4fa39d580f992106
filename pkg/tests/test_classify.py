import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stconv import classify
from stconv.errors import DegenerateError, EmptyInputError, InvalidRangeError, LabelError, ShapeError
from stconv.evaluation import SyntheticSpec, generate_synthetic
from stconv.layers import instantiate
from stconv.netspec import build_c3d, build_tiny_r2p1d
from stconv.optim import SgdConfig
from stconv.tensor import DTYPE, new_rng
from stconv.video import Clip, SamplerConfig, VideoSource


def perceptron_separates(X, y, epochs=1000):
    """Independent check: the perceptron converges iff the set is linearly separable."""
    Xa = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(Xa.shape[1])
    for _ in range(epochs):
        mistakes = 0
        for x, label in zip(Xa, y):
            if label * (w @ x) <= 0:
                w += label * x
                mistakes += 1
        if mistakes == 0:
            return True
    return False


@pytest.fixture(scope="module")
def small_c3d():
    return instantiate(build_c3d(2, frames=16, crop=32), new_rng(0))


class TestFc6:
    def test_width_and_determinism(self, small_c3d, rng):
        data = rng.uniform(0, 1, (3, 16, 32, 32)).astype(DTYPE)
        feats = classify.extract_fc6(small_c3d, [Clip("a", 0, data), Clip("b", 0, data.copy())])
        assert [f.shape for f in feats] == [(4096,), (4096,)]
        np.testing.assert_array_equal(feats[0], feats[1])

    def test_zero_network(self, rng):
        net = instantiate(build_c3d(2, frames=16, crop=32), None)
        feats = classify.extract_fc6(net, [Clip("a", 0, rng.uniform(0, 1, (3, 16, 32, 32)).astype(DTYPE))])
        assert not feats[0].any()

    def test_wrong_geometry(self, small_c3d):
        with pytest.raises(ShapeError):
            classify.extract_fc6(small_c3d, [Clip("a", 0, np.zeros((3, 8, 32, 32), DTYPE))])

    def test_needs_fc6(self):
        net = instantiate(build_tiny_r2p1d(), None)
        with pytest.raises(ShapeError):
            classify.extract_fc6(net, [])


class TestAggregation:
    def test_three_four_five(self):
        v = np.zeros(4096)
        v[:2] = [3, 4]
        out = classify.aggregate_descriptor([v])
        np.testing.assert_allclose(out[:3], [0.6, 0.8, 0.0], rtol=1e-6)

    def test_copies(self, rng):
        v = rng.standard_normal(16)
        np.testing.assert_allclose(classify.aggregate_descriptor([v] * 5), v / np.linalg.norm(v), rtol=1e-6)

    def test_opposite_vectors(self, rng):
        v = rng.standard_normal(8)
        with pytest.raises(DegenerateError):
            classify.aggregate_descriptor([v, -v])

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            classify.aggregate_descriptor([])
        with pytest.raises(EmptyInputError):
            classify.aggregate_softmax([])

    def test_softmax_mean(self):
        np.testing.assert_allclose(classify.aggregate_softmax([np.array([0.8, 0.2]), np.array([0.6, 0.4])]),
                                   [0.7, 0.3], rtol=1e-6)

    def test_softmax_single_and_uniform(self):
        p = np.array([0.1, 0.7, 0.2])
        np.testing.assert_allclose(classify.aggregate_softmax([p]), p, rtol=1e-6)
        np.testing.assert_allclose(classify.aggregate_softmax([np.full(4, 0.25)] * 3), 0.25)

    def test_softmax_off_simplex(self):
        with pytest.raises(InvalidRangeError):
            classify.aggregate_softmax([np.array([0.5, 0.6])])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
    def test_permutation_invariance(self, seed, n):
        r = np.random.default_rng(seed)
        feats = [r.standard_normal(32).astype(DTYPE) for _ in range(n)]
        logits = r.standard_normal((n, 5))
        probs = list(np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True))
        perm = r.permutation(n)
        a = classify.aggregate_descriptor(feats)
        b = classify.aggregate_descriptor([feats[i] for i in perm])
        assert a.tobytes() == b.tobytes()
        assert abs(float(np.linalg.norm(a.astype(np.float64))) - 1) <= 1e-6
        pa = classify.aggregate_softmax(probs)
        pb = classify.aggregate_softmax([probs[i] for i in perm])
        assert pa.tobytes() == pb.tobytes()
        assert abs(float(pa.astype(np.float64).sum()) - 1) <= 1e-6 and np.all(pa >= 0)


class TestSvm:
    def test_separable_toy(self):
        r = np.random.default_rng(0)
        pts = r.uniform(-1, 1, (400, 2))
        pts = pts[np.abs(pts[:, 0] + pts[:, 1]) >= 0.5 * np.sqrt(2)][:80]
        y = np.where(pts[:, 0] + pts[:, 1] > 0, 1, -1)
        assert perceptron_separates(pts, y)
        model = classify.svm_train(pts, y, 1e-4, 100, new_rng(1))
        preds = [classify.svm_predict(model, p)[0] for p in pts]
        assert preds == list(y)

    def test_symmetric_pair(self):
        X = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        model = classify.svm_train(X, [1, -1], 1e-4, 50, new_rng(0))
        assert model.weights[0] > 0
        assert [classify.svm_predict(model, x)[0] for x in X] == [1, -1]

    def test_regularization_dominance(self):
        r = np.random.default_rng(2)
        X = r.standard_normal((20, 6))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        model = classify.svm_train(X, np.where(np.arange(20) % 2, 1, -1), 1e6, 20, new_rng(0))
        assert np.linalg.norm(model.weights) <= 1e-2

    def test_single_class(self):
        with pytest.raises(DegenerateError):
            classify.svm_train(np.eye(3), [1, 1, 1])

    def test_bad_labels(self):
        with pytest.raises(LabelError):
            classify.svm_train(np.eye(2), [0, 1])

    def test_objective_non_increasing(self):
        r = np.random.default_rng(5)
        y = np.where(np.arange(60) % 2, 1, -1)
        X = r.standard_normal((60, 20)) + 0.5 * y[:, None] * np.eye(20)[0]
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        model = classify.svm_train(X, y, 1e-4, 100, new_rng(5))
        obj = np.array(model.objective)
        assert len(obj) == 100
        assert np.all(np.diff(obj) <= 1e-6)
        final = classify.svm_objective(X, y, model.weights.astype(np.float64), model.bias, 1e-4)
        assert final == pytest.approx(obj[-1], rel=1e-5)

    def test_seeded(self):
        X = np.random.default_rng(0).standard_normal((10, 4))
        y = np.where(np.arange(10) < 5, 1, -1)
        a = classify.svm_train(X, y, 1e-3, 10, new_rng(7))
        b = classify.svm_train(X, y, 1e-3, 10, new_rng(7))
        assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias

    def test_tie_goes_positive(self):
        model = classify.LinearSvmModel(np.zeros(3, DTYPE), 0.0, 1e-4, 0)
        assert classify.svm_predict(model, np.ones(3)) == (1, 0.0)

    def test_positive_scaling(self):
        model = classify.LinearSvmModel(np.array([0.5, -2.0], DTYPE), 0.0, 1e-4, 0)
        for x in ([1.0, 0.1], [0.1, 1.0]):
            assert classify.svm_predict(model, x)[0] == classify.svm_predict(model, 2 * np.array(x))[0]

    def test_dimension_mismatch(self):
        model = classify.LinearSvmModel(np.zeros(3, DTYPE), 0.0, 1e-4, 0)
        with pytest.raises(ShapeError):
            classify.svm_predict(model, np.ones(4))

    def test_entries_roundtrip(self):
        model = classify.LinearSvmModel(np.array([1.5, -0.25], DTYPE), 0.125, 1e-4, 3)
        back = classify.svm_from_entries(classify.svm_to_entries(model))
        np.testing.assert_array_equal(back.weights, model.weights)
        assert back.bias == 0.125


@pytest.fixture(scope="module")
def tiny_videos():
    return generate_synthetic(SyntheticSpec(videos_per_class=8, frames=16, seed=3))


SAMPLER = SamplerConfig(8, 4, None, (28, 28), flip_prob=0.0)


class TestFinetune:
    def test_loss_decreases(self, tiny_videos):
        net = instantiate(build_tiny_r2p1d(), new_rng(0))
        cfg = SgdConfig(0.05, 0.1, 2, 0.9, 4, "epoch")
        _, trace = classify.finetune(net, tiny_videos, cfg, 4, new_rng(1), SAMPLER)
        first = np.mean([r.loss for r in trace if r.epoch == 0])
        last = np.mean([r.loss for r in trace if r.epoch == 3])
        assert last < first
        assert len(trace) == 4 * len(tiny_videos) * 4 // 4
        assert trace[-1].lr == pytest.approx(0.05 * 0.1)

    def test_zero_learning_rate(self, tiny_videos):
        net = instantiate(build_tiny_r2p1d(), new_rng(0))
        before = {k: v.copy() for k, v in net.parameters().items()}
        classify.finetune(net, tiny_videos, SgdConfig(0.0, batch_size=4), 1, new_rng(1), SAMPLER)
        assert all(net.parameters()[k].tobytes() == before[k].tobytes() for k in before)

    def test_label_out_of_range(self, tiny_videos):
        bad = [VideoSource("x", tiny_videos[0].frames, 5)]
        with pytest.raises(LabelError):
            classify.finetune(instantiate(build_tiny_r2p1d(), None), bad, SgdConfig(0.1), 1,
                              new_rng(0), SAMPLER)

    def test_reproducible(self, tiny_videos):
        def run():
            net = instantiate(build_tiny_r2p1d(), new_rng(0))
            _, trace = classify.finetune(net, tiny_videos[:4], SgdConfig(0.01, batch_size=4), 1,
                                         new_rng(1), SAMPLER, 2)
            return [r.loss for r in trace], net.state_dict()

        (la, sa), (lb, sb) = run(), run()
        assert la == lb
        assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)

    def test_predict_video(self, tiny_videos):
        net = instantiate(build_tiny_r2p1d(), new_rng(0))
        cls, probs = classify.predict_video(net, tiny_videos[0], SAMPLER)
        assert cls == int(np.argmax(probs))
        assert abs(float(probs.astype(np.float64).sum()) - 1) <= 1e-6

    def test_descriptor_is_unit(self, tiny_videos):
        net = instantiate(build_tiny_r2p1d(), new_rng(0))
        d = classify.video_descriptor(net, tiny_videos[0], SAMPLER)
        assert d.vector.shape == (16,)
        assert abs(float(np.linalg.norm(d.vector.astype(np.float64))) - 1) <= 1e-6
