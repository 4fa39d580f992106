import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stconv.errors import ConfigError, GeometryError
from stconv.netspec import (LayerSpec, NetSpec, build_2p1d_block, build_c3d, build_net,
                            build_r2p1d_34, build_tiny_r2p1d, conv2p1d_spec, conv3d_spec,
                            count_conv_relus, count_flops, count_params, factorize,
                            layer_params, manifest, midplane_channels, output_shape,
                            residual_block_spec, trace)


class TestMidplane:
    def test_square_case(self):
        assert midplane_channels(3, 3, 64, 64) == 144
        assert 9 * 64 * 144 + 3 * 144 * 64 == 110592 == 27 * 64 * 64

    def test_rgb_input(self):
        m = midplane_channels(3, 3, 3, 64)
        assert m == 23
        assert 9 * 3 * m + 3 * m * 64 == 5037 <= 5184

    @pytest.mark.parametrize("d,n_in,n_out", [(3, 16, 16), (7, 3, 64)])
    def test_no_temporal_extent(self, d, n_in, n_out):
        assert midplane_channels(1, d, n_in, n_out) == (d * d * n_in * n_out) // (d * d * n_in + n_out)

    @settings(max_examples=300, deadline=None)
    @given(t=st.integers(1, 7), d=st.integers(1, 7), n_in=st.integers(1, 600), n_out=st.integers(1, 600))
    def test_largest_fitting(self, t, d, n_in, n_out):
        m = midplane_channels(t, d, n_in, n_out)
        full = t * d * d * n_in * n_out
        cost = d * d * n_in + t * n_out
        assert m * cost <= full < (m + 1) * cost


class TestBlocks:
    def test_2p1d_block_layout(self):
        spatial, bn, relu, temporal = build_2p1d_block(3, 3, 64, 64, stride=(2, 2, 2))
        assert (spatial.kernel, spatial.stride, spatial.out_channels) == ((1, 3, 3), (1, 2, 2), 144)
        assert bn.kind == "batchnorm" and relu.kind == "relu"
        assert (temporal.kernel, temporal.stride, temporal.in_channels) == ((3, 1, 1), (2, 1, 1), 144)

    def test_2p1d_shape_matches_conv3d(self):
        for stride in (1, 2):
            full = NetSpec("a", (64, 8, 14, 14), (conv3d_spec("c", 64, 64, 3, stride),))
            fact = NetSpec("b", (64, 8, 14, 14), (conv2p1d_spec("c", 64, 64, 3, stride),))
            assert output_shape(full) == output_shape(fact)

    def test_2p1d_params_by_enumeration(self):
        specs = build_2p1d_block(3, 3, 64, 64)
        weights = [s for s in specs if s.kind == "conv3d"]
        assert sum(np.prod((s.out_channels, s.in_channels) + s.kernel) for s in weights) == 110592
        assert sum(layer_params(s, weights_only=True) for s in specs) == 110592

    def test_block_relu_count(self):
        assert [s.kind for s in build_2p1d_block(3, 3, 8, 8)].count("relu") == 1

    def test_residual_projection(self):
        assert residual_block_spec("b", 64, 64, 1).shortcut == ()
        down = residual_block_spec("b", 64, 128, 2)
        conv, bn = down.shortcut
        assert conv.kernel == (1, 1, 1) and conv.stride == (2, 2, 2) and bn.kind == "batchnorm"

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            LayerSpec("dropout", "d")


class TestC3d:
    def test_counts(self):
        net = build_c3d(2)
        kinds = [s.kind for s in net.layers]
        assert kinds.count("conv3d") == 8 and kinds.count("maxpool3d") == 5
        assert [s.out_channels for s in net.layers if s.kind == "conv3d"] == [64, 128, 256, 256, 512, 512, 512, 512]

    def test_fc_widths(self):
        net = build_c3d(5)
        assert net.layer("fc6").out_channels == 4096
        assert net.layer("fc7").out_channels == 4096
        assert output_shape(net) == (1, 5)
        assert net.feature_layer == "fc6"

    def test_params(self):
        assert count_params(build_c3d(2)) == 78_003_970

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            build_c3d(1)


class TestR2p1d:
    def test_multiplicities(self):
        net = build_r2p1d_34()
        blocks = [s.name.split("_")[0] for s in net.layers if s.kind == "residual_block"]
        assert [blocks.count(f"conv{i}") for i in (2, 3, 4, 5)] == [3, 4, 6, 3]

    def test_all_block_convs_factorized(self):
        for s in build_r2p1d_34().layers:
            if s.kind == "residual_block":
                assert {m.kind for m in s.main if m.name.startswith("conv")} == {"conv2p1d"}

    @pytest.mark.parametrize("frames", [12, 20, 33])
    def test_frames_must_divide_by_8(self, frames):
        with pytest.raises(GeometryError):
            build_r2p1d_34(frames=frames)

    def test_totals(self):
        net = build_r2p1d_34()
        assert count_params(net) == 63_505_959
        assert count_flops(net) == 307_296_491_520

    def test_flops_scale_with_batch(self):
        net = build_tiny_r2p1d()
        one = count_flops(net, (1,) + net.input_shape)
        assert count_flops(net, (2,) + net.input_shape) == 2 * one
        assert count_params(net) == 17_694



class TestAccounting:
    def test_single_conv_params(self):
        net = NetSpec("one", (64, 4, 8, 8), (conv3d_spec("c", 64, 64, 3),))
        assert count_params(net) == 110592 + 64

    def test_flops_of_single_conv(self):
        net = NetSpec("one", (2, 3, 4, 4), (conv3d_spec("c", 2, 5, 3),))
        assert count_flops(net) == 2 * 2 * 5 * 27 * 3 * 4 * 4

    def test_unknown_net(self):
        with pytest.raises(ConfigError):
            build_net("vgg16")


class TestManifest:
    def test_columns(self):
        text = manifest(build_tiny_r2p1d())
        rows = [line.split("\t") for line in text.splitlines() if not line.startswith("#")]
        assert all(len(r) == 5 for r in rows)
        assert rows[-1][0] == "prob" and rows[-1][4] == "2"

    def test_nested_rows_indented(self):
        text = manifest(build_r2p1d_34())
        assert "\n  conv1.spatial\tconv3d\tk=1x7x7 s=1x2x2 p=0x3x3\t3->83\t83x32x56x56\n" in text
        assert "\n    conv3_1.conv_a.temporal\t" in text

    def test_trace_chains(self):
        rows = [r for r in trace(build_c3d()) if r.depth == 0]
        for a, b in zip(rows, rows[1:]):
            assert a.output_shape == b.input_shape
