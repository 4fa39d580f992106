import numpy as np
import pytest

from stconv import ops
from stconv.errors import FormatError
from stconv.layers import instantiate, no_grad
from stconv.netspec import NetSpec, build_c3d, build_tiny_r2p1d, residual_block_spec
from stconv.tensor import DTYPE, new_rng


def to_float64(net):
    for _, layer in net._walk(""):
        for key in layer.params:
            layer.params[key] = layer.params[key].astype(np.float64)
        for key in layer.buffers:
            layer.buffers[key] = layer.buffers[key].astype(np.float64)


@pytest.fixture(scope="module")
def tiny():
    return instantiate(build_tiny_r2p1d(), new_rng(5))


class TestInstantiate:
    def test_param_count_matches_spec(self, tiny):
        assert sum(p.size for p in tiny.parameters().values()) == 17_694

    def test_names_are_manifest_paths(self, tiny):
        names = set(tiny.parameters())
        assert "conv1.spatial.weight" in names
        assert "conv2_1.conv_a.temporal.weight" in names
        assert "conv3_1.shortcut_conv.weight" in names
        assert "conv2_1.bn_b.running_var" in tiny.state_dict()

    def test_seeded_init_reproducible(self):
        a = instantiate(build_tiny_r2p1d(), new_rng(1)).state_dict()
        b = instantiate(build_tiny_r2p1d(), new_rng(1)).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_init_bound(self, tiny):
        w = tiny.parameters()["conv2_1.conv_a.spatial.weight"]
        assert np.abs(w).max() <= np.sqrt(1.0 / (8 * 9))

    def test_forward_probabilities(self, tiny, rng):
        x = rng.uniform(0, 1, (3, 3, 8, 28, 28)).astype(DTYPE)
        p = tiny.predict_proba(x)
        assert p.shape == (3, 2)
        np.testing.assert_allclose(p.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)


class TestResidual:
    def test_zero_convs_give_relu(self, rng):
        spec = NetSpec("res", (4, 4, 6, 6), (residual_block_spec("block", 4, 4, 1),))
        net = instantiate(spec, None)
        x = rng.standard_normal((2, 4, 4, 6, 6)).astype(DTYPE)
        np.testing.assert_array_equal(net.forward(x), np.maximum(x, 0))

    def test_downsampling_shape(self, rng):
        spec = NetSpec("res", (4, 4, 6, 6), (residual_block_spec("block", 4, 8, 2),))
        net = instantiate(spec, new_rng(0))
        assert net.forward(rng.standard_normal((1, 4, 4, 6, 6)).astype(DTYPE)).shape == (1, 8, 2, 3, 3)


class TestBackward:
    def test_whole_network_gradient(self, rng):
        net = instantiate(build_tiny_r2p1d(frames=4, crop=14, widths=(3, 4)), new_rng(3))
        to_float64(net)
        x = rng.standard_normal((3, 3, 4, 14, 14))
        labels = np.array([0, 1, 1])

        def loss():
            return ops.cross_entropy_loss(ops.softmax(net.logits(x, train=True)), labels)

        probs = ops.softmax(net.logits(x, train=True))
        net.zero_grad()
        net.backward(ops.cross_entropy_grad_logits(probs, labels))
        grads = net.gradients()
        pick = np.random.default_rng(0)
        for name, w in net.parameters().items():
            for j in pick.choice(w.size, min(3, w.size), replace=False):
                idx = np.unravel_index(j, w.shape)
                old = w[idx]
                w[idx] = old + 1e-5
                up = loss()
                w[idx] = old - 1e-5
                down = loss()
                w[idx] = old
                # loose bound: a ReLU kink can sit inside the difference interval
                assert abs((up - down) / 2e-5 - grads[name][idx]) <= 1e-3, name

    def test_no_grad_keeps_no_cache(self, rng):
        net = instantiate(build_tiny_r2p1d(), new_rng(0))
        with no_grad():
            net.forward(rng.uniform(0, 1, (1, 3, 8, 28, 28)).astype(DTYPE))
        assert net.layers[0].layers[0]._x is None


class TestStateDict:
    def test_roundtrip(self, tiny):
        other = instantiate(build_tiny_r2p1d(), new_rng(99))
        other.load_state_dict(tiny.state_dict())
        a, b = tiny.state_dict(), other.state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_strict_mismatch(self, tiny):
        state = tiny.state_dict()
        state.pop("fc.weight")
        with pytest.raises(FormatError):
            instantiate(build_tiny_r2p1d(), None).load_state_dict(state)

    def test_shape_mismatch(self, tiny):
        state = tiny.state_dict()
        state["fc.bias"] = np.zeros(3, DTYPE)
        with pytest.raises(FormatError):
            instantiate(build_tiny_r2p1d(), None).load_state_dict(state, strict=False)


class TestC3dFeatures:
    def test_small_input_fc6_width(self, rng):
        # reduced spatial extent keeps the test quick; fc6 width is unchanged
        spec = build_c3d(2, frames=16, crop=32)
        net = instantiate(spec, new_rng(0))
        f = net.features(rng.uniform(0, 1, (1, 3, 16, 32, 32)).astype(DTYPE))
        assert f.shape == (1, 4096)

    def test_zero_network_zero_features(self, rng):
        net = instantiate(build_c3d(2, frames=16, crop=32), None)
        assert not net.features(rng.uniform(0, 1, (1, 3, 16, 32, 32)).astype(DTYPE)).any()
