"""Declarative network descriptions and the C3D / R(2+1)D builders.

A :class:`NetSpec` is an immutable ordered list of :class:`LayerSpec` values
plus the ``C x T x H x W`` input it accepts.  Shapes, parameter counts and
FLOP counts are all derived from the NetSpec alone, so the full-size networks
can be described and checked without allocating their weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

from .errors import ConfigError, GeometryError, ShapeError
from .ops import Triple, conv_flops, out_shape3, triple

CONV_KINDS = ("conv3d", "conv2p1d")
KINDS = ("conv3d", "conv2p1d", "maxpool3d", "batchnorm", "relu", "fc", "softmax",
         "residual_block", "global_avg_pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: Triple = (1, 1, 1)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    bias: bool = True
    midplane: int = 0
    main: tuple["LayerSpec", ...] = ()
    shortcut: tuple["LayerSpec", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def expand(self) -> tuple["LayerSpec", ...]:
        """The spatial conv / bn / relu / temporal conv sequence of a conv2p1d layer."""
        if self.kind != "conv2p1d":
            raise ConfigError(f"{self.name}: only conv2p1d layers expand")
        t, d, _ = self.kernel
        st, sh, sw = self.stride
        pt, ph, pw = self.padding
        m = self.midplane
        return (
            LayerSpec("conv3d", "spatial", self.in_channels, m, (1, d, d), (1, sh, sw),
                      (0, ph, pw), bias=False),
            LayerSpec("batchnorm", "bn", m, m),
            LayerSpec("relu", "relu"),
            LayerSpec("conv3d", "temporal", m, self.out_channels, (t, 1, 1), (st, 1, 1),
                      (pt, 0, 0), bias=self.bias),
        )


@dataclass(frozen=True)
class NetSpec:
    name: str
    input_shape: tuple[int, int, int, int]  # C, T, H, W
    layers: tuple[LayerSpec, ...]
    feature_layer: str = ""
    num_classes: int = 0
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)


# ------------------------------------------------------------------ blocks


def midplane_channels(t: int, d: int, n_in: int, n_out: int) -> int:
    """Largest M with ``d^2*n_in*M + t*M*n_out <= t*d^2*n_in*n_out``."""
    if min(t, d, n_in, n_out) < 1:
        raise ConfigError("midplane_channels arguments must all be >= 1")
    return (t * d * d * n_in * n_out) // (d * d * n_in + t * n_out)


def conv3d_spec(name: str, n_in: int, n_out: int, kernel=3, stride=1, padding=None,
                bias: bool = True) -> LayerSpec:
    kernel = triple(kernel)
    padding = tuple(k // 2 for k in kernel) if padding is None else triple(padding)
    return LayerSpec("conv3d", name, n_in, n_out, kernel, triple(stride), padding, bias=bias)


def conv2p1d_spec(name: str, n_in: int, n_out: int, kernel=3, stride=1, padding=None,
                  bias: bool = False) -> LayerSpec:
    t, d, d2 = triple(kernel)
    if d != d2:
        raise GeometryError(f"{name}: (2+1)D needs a square spatial kernel, got {kernel}")
    padding = (t // 2, d // 2, d // 2) if padding is None else triple(padding)
    return LayerSpec("conv2p1d", name, n_in, n_out, (t, d, d), triple(stride), padding,
                     bias=bias, midplane=midplane_channels(t, d, n_in, n_out))


def factorize_conv(spec: LayerSpec) -> LayerSpec:
    if spec.kind != "conv3d":
        raise ConfigError(f"{spec.name}: expected a conv3d layer")
    return conv2p1d_spec(spec.name, spec.in_channels, spec.out_channels, spec.kernel,
                         spec.stride, spec.padding, bias=spec.bias)


def build_2p1d_block(t: int, d: int, n_in: int, n_out: int, stride=1,
                     bias: bool = False) -> tuple[LayerSpec, ...]:
    """Spatial ``1 x d x d`` conv, batchnorm, ReLU, temporal ``t x 1 x 1`` conv."""
    return conv2p1d_spec("conv", n_in, n_out, (t, d, d), stride, bias=bias).expand()


def _is_spatiotemporal(spec: LayerSpec) -> bool:
    t, h, w = spec.kernel
    return spec.kind == "conv3d" and t > 1 and h > 1 and h == w


def factorize(net: NetSpec) -> NetSpec:
    """Replace every ``t x d x d`` conv3d (t, d > 1) with its (2+1)D counterpart."""

    def walk(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
        out = []
        for s in specs:
            if _is_spatiotemporal(s):
                out.append(factorize_conv(s))
            elif s.kind == "residual_block":
                out.append(replace(s, main=walk(s.main)))
            else:
                out.append(s)
        return tuple(out)

    return replace(net, name=f"{net.name}-2p1d", layers=walk(net.layers))


def residual_block_spec(name: str, n_in: int, n_out: int, stride: int,
                        factorized: bool = True) -> LayerSpec:
    make = conv2p1d_spec if factorized else conv3d_spec
    main = (
        make("conv_a", n_in, n_out, 3, stride, bias=False),
        LayerSpec("batchnorm", "bn_a", n_out, n_out),
        LayerSpec("relu", "relu_a"),
        make("conv_b", n_out, n_out, 3, 1, bias=False),
        LayerSpec("batchnorm", "bn_b", n_out, n_out),
    )
    shortcut: tuple[LayerSpec, ...] = ()
    if stride != 1 or n_in != n_out:
        shortcut = (
            conv3d_spec("shortcut_conv", n_in, n_out, 1, stride, 0, bias=False),
            LayerSpec("batchnorm", "shortcut_bn", n_out, n_out),
        )
    return LayerSpec("residual_block", name, n_in, n_out, stride=triple(stride),
                     main=main, shortcut=shortcut)


# ---------------------------------------------------------------- networks


_C3D_CONVS = (
    ("conv1a", 3, 64), ("pool1",),
    ("conv2a", 64, 128), ("pool2",),
    ("conv3a", 128, 256), ("conv3b", 256, 256), ("pool3",),
    ("conv4a", 256, 512), ("conv4b", 512, 512), ("pool4",),
    ("conv5a", 512, 512), ("conv5b", 512, 512), ("pool5",),
)


def build_c3d(num_classes: int = 2, frames: int = 16, crop: int = 112) -> NetSpec:
    """VGG-style C3D: 8 convs (3x3x3, stride 1), 5 pools, fc6/fc7 of 4096 units, softmax."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    layers: list[LayerSpec] = []
    for entry in _C3D_CONVS:
        if len(entry) == 1:
            name = entry[0]
            if name == "pool1":
                layers.append(LayerSpec("maxpool3d", name, kernel=(1, 2, 2), stride=(1, 2, 2)))
            elif name == "pool5":
                layers.append(LayerSpec("maxpool3d", name, kernel=(2, 2, 2), stride=(2, 2, 2),
                                        padding=(0, 1, 1)))
            else:
                layers.append(LayerSpec("maxpool3d", name, kernel=(2, 2, 2), stride=(2, 2, 2)))
        else:
            name, n_in, n_out = entry
            layers.append(conv3d_spec(name, n_in, n_out, 3, 1, 1))
            layers.append(LayerSpec("relu", "relu" + name[4:]))
    conv_part = NetSpec("c3d", (3, frames, crop, crop), tuple(layers))
    flat = 1
    for extent in output_shape(conv_part)[1:]:
        flat *= extent
    layers += [
        LayerSpec("fc", "fc6", flat, 4096),
        LayerSpec("relu", "relu6"),
        LayerSpec("fc", "fc7", 4096, 4096),
        LayerSpec("relu", "relu7"),
        LayerSpec("fc", "fc8", 4096, num_classes),
        LayerSpec("softmax", "prob"),
    ]
    return NetSpec("c3d", (3, frames, crop, crop), tuple(layers), feature_layer="fc6",
                   num_classes=num_classes)


def build_r2p1d(name: str, num_classes: int, frames: int, *, stem_channels: int,
                widths: Sequence[int], blocks: Sequence[int], crop: int = 112,
                factorized: bool = True) -> NetSpec:
    """Residual (2+1)D network: strided stem, residual stages, global pool, fc, softmax.

    Every stage after the first halves T, H and W in its first block.  With
    ``factorized=False`` the same topology is built from plain 3D convs.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if len(widths) != len(blocks) or not widths:
        raise ConfigError("widths and blocks must be non-empty and equally long")
    halvings = 2 ** (len(widths) - 1)
    if frames % halvings:
        raise GeometryError(f"clip length {frames} must be divisible by {halvings}")
    make = conv2p1d_spec if factorized else conv3d_spec
    layers = [
        make("conv1", 3, stem_channels, (3, 7, 7), (1, 2, 2), (1, 3, 3), bias=False),
        LayerSpec("batchnorm", "bn1", stem_channels, stem_channels),
        LayerSpec("relu", "relu1"),
    ]
    n_in = stem_channels
    for stage, (width, count) in enumerate(zip(widths, blocks)):
        for b in range(count):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(residual_block_spec(f"conv{stage + 2}_{b + 1}", n_in, width, stride,
                                              factorized))
            n_in = width
    layers += [
        LayerSpec("global_avg_pool", "pool"),
        LayerSpec("fc", "fc", n_in, num_classes),
        LayerSpec("softmax", "prob"),
    ]
    return NetSpec(name, (3, frames, crop, crop), tuple(layers), feature_layer="pool",
                   num_classes=num_classes)


def build_r2p1d_34(num_classes: int = 2, frames: int = 32, factorized: bool = True) -> NetSpec:
    """34-layer R(2+1)D: stages of (3, 4, 6, 3) blocks at 64/128/256/512 channels."""
    return build_r2p1d("r2p1d34" if factorized else "r3d34", num_classes, frames,
                       stem_channels=64, widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3),
                       factorized=factorized)


def build_tiny_r2p1d(num_classes: int = 2, frames: int = 8, crop: int = 28,
                     widths: Sequence[int] = (8, 16)) -> NetSpec:
    """Desk-scale R(2+1)D: two single-block stages."""
    return build_r2p1d("tiny-r2p1d", num_classes, frames, stem_channels=widths[0],
                       widths=widths, blocks=(1,) * len(widths), crop=crop)


def build_net(name: str, num_classes: int = 2, frames: int | None = None,
              crop: int | None = None) -> NetSpec:
    if name == "c3d":
        return build_c3d(num_classes, frames or 16, crop or 112)
    if name == "r2p1d34":
        return build_r2p1d("r2p1d34", num_classes, frames or 32, stem_channels=64,
                           widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), crop=crop or 112)
    if name == "tiny-r2p1d":
        return build_tiny_r2p1d(num_classes, frames or 8, crop or 28)
    raise ConfigError(f"unknown network {name!r} (choose c3d, r2p1d34, tiny-r2p1d)")


# ------------------------------------------------------------ shape algebra


def layer_output_shape(spec: LayerSpec, shape: Sequence[int]) -> tuple[int, ...]:
    """Output shape of one layer for an ``N x C x T x H x W`` or ``N x D`` input."""
    shape = tuple(shape)
    kind = spec.kind
    if kind in ("relu", "batchnorm", "softmax"):
        if kind == "batchnorm" and shape[1] != spec.in_channels:
            raise ShapeError(f"{spec.name}: expects {spec.in_channels} channels, got {shape[1]}")
        return shape
    if kind == "fc":
        flat = 1
        for s in shape[1:]:
            flat *= s
        if flat != spec.in_channels:
            raise ShapeError(f"{spec.name}: expects input width {spec.in_channels}, got {flat}")
        return (shape[0], spec.out_channels)
    if len(shape) != 5:
        raise ShapeError(f"{spec.name}: {kind} needs a 5-D input, got {shape}")
    n, c = shape[:2]
    if kind == "global_avg_pool":
        return (n, c)
    if kind == "maxpool3d":
        return (n, c) + out_shape3(shape[2:], spec.kernel, spec.stride, spec.padding)
    if kind in CONV_KINDS:
        if c != spec.in_channels:
            raise ShapeError(f"{spec.name}: expects {spec.in_channels} channels, got {c}")
        if kind == "conv2p1d":
            for sub in spec.expand():
                shape = layer_output_shape(sub, shape)
            return shape
        return (n, spec.out_channels) + out_shape3(shape[2:], spec.kernel, spec.stride,
                                                   spec.padding)
    if kind == "residual_block":
        main = shape
        for sub in spec.main:
            main = layer_output_shape(sub, main)
        short = shape
        for sub in spec.shortcut:
            short = layer_output_shape(sub, short)
        if main != short:
            raise ShapeError(f"{spec.name}: branch shapes differ {main} vs {short}")
        return main
    raise ConfigError(f"unhandled layer kind {kind}")


@dataclass(frozen=True)
class TraceRow:
    path: str
    depth: int
    spec: LayerSpec
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]


def _trace(specs: Sequence[LayerSpec], shape, prefix: str, depth: int) -> Iterator[TraceRow]:
    for spec in specs:
        path = f"{prefix}{spec.name}"
        out = layer_output_shape(spec, shape)
        yield TraceRow(path, depth, spec, tuple(shape), out)
        if spec.kind == "conv2p1d":
            yield from _trace(spec.expand(), shape, path + ".", depth + 1)
        elif spec.kind == "residual_block":
            yield from _trace(spec.main, shape, path + ".", depth + 1)
            yield from _trace(spec.shortcut, shape, path + ".", depth + 1)
        shape = out


def trace(net: NetSpec, batch: int = 1) -> list[TraceRow]:
    """Every layer (nested ones included) with its input and output shape."""
    return list(_trace(net.layers, (batch,) + tuple(net.input_shape), "", 0))


def output_shape(net: NetSpec, batch: int = 1) -> tuple[int, ...]:
    shape = (batch,) + tuple(net.input_shape)
    for spec in net.layers:
        shape = layer_output_shape(spec, shape)
    return shape


# --------------------------------------------------------------- accounting


def _leaf_rows(net: NetSpec, batch: int) -> Iterator[TraceRow]:
    for row in trace(net, batch):
        if row.spec.kind not in ("conv2p1d", "residual_block"):
            yield row


def layer_params(spec: LayerSpec, weights_only: bool = False) -> int:
    if spec.kind == "conv3d":
        kt, kh, kw = spec.kernel
        n = spec.in_channels * spec.out_channels * kt * kh * kw
        return n + (spec.out_channels if spec.bias and not weights_only else 0)
    if spec.kind == "fc":
        n = spec.in_channels * spec.out_channels
        return n + (spec.out_channels if spec.bias and not weights_only else 0)
    if spec.kind == "batchnorm":
        return 0 if weights_only else 2 * spec.in_channels
    if spec.kind == "conv2p1d":
        return sum(layer_params(s, weights_only) for s in spec.expand())
    if spec.kind == "residual_block":
        return sum(layer_params(s, weights_only) for s in spec.main + spec.shortcut)
    return 0


def count_params(net: NetSpec, weights_only: bool = False) -> int:
    """Trainable parameters; ``weights_only`` drops biases and batchnorm affine terms."""
    return sum(layer_params(s, weights_only) for s in net.layers)


def count_flops(net: NetSpec, input_shape: Sequence[int] | None = None) -> int:
    """2 x multiply-accumulates over every conv and fc layer.

    ``input_shape`` is ``N x C x T x H x W``; defaults to batch 1 of the
    net's declared input.
    """
    if input_shape is None:
        input_shape = (1,) + tuple(net.input_shape)
    batch = input_shape[0]
    if tuple(input_shape[1:]) != tuple(net.input_shape):
        net = replace(net, input_shape=tuple(input_shape[1:]))
    total = 0
    for row in _leaf_rows(net, batch):
        spec = row.spec
        if spec.kind == "conv3d":
            positions = row.output_shape[0] * row.output_shape[2] * row.output_shape[3] \
                * row.output_shape[4]
            total += conv_flops(spec.in_channels, spec.out_channels, spec.kernel, positions)
        elif spec.kind == "fc":
            total += 2 * row.output_shape[0] * spec.in_channels * spec.out_channels
    return total


def count_conv_relus(specs: Sequence[LayerSpec] | NetSpec) -> int:
    """ReLUs whose nearest preceding weighted layer is a convolution.

    A conv2p1d layer contributes its internal ReLU; a residual block
    contributes its main-branch ReLUs plus the one applied after the add.
    """
    if isinstance(specs, NetSpec):
        specs = specs.layers
    count = 0
    last = ""
    for s in specs:
        if s.kind in CONV_KINDS:
            last = "conv"
            if s.kind == "conv2p1d":
                count += 1
        elif s.kind == "fc":
            last = "fc"
        elif s.kind == "relu" and last == "conv":
            count += 1
        elif s.kind == "residual_block":
            count += count_conv_relus(s.main) + 1
            last = "conv"
    return count


# ----------------------------------------------------------------- manifest


def _fmt(shape: Sequence[int]) -> str:
    return "x".join(str(s) for s in shape)


def manifest(net: NetSpec, batch: int = 1) -> str:
    """Human-readable layer table: name, kind, geometry, channels, output shape."""
    lines = [f"# net {net.name} input {_fmt(net.input_shape)} classes {net.num_classes}",
             "# layer\tkind\tgeometry\tchannels\toutput"]
    for row in trace(net, batch):
        s = row.spec
        geometry = "-"
        channels = "-"
        if s.kind in ("conv3d", "conv2p1d", "maxpool3d"):
            geometry = f"k={_fmt(s.kernel)} s={_fmt(s.stride)} p={_fmt(s.padding)}"
        elif s.kind == "residual_block":
            geometry = f"s={_fmt(s.stride)}" + (" proj" if s.shortcut else " identity")
        if s.kind in ("conv3d", "conv2p1d", "fc", "residual_block"):
            channels = f"{s.in_channels}->{s.out_channels}"
            if s.kind == "conv2p1d":
                channels += f" mid={s.midplane}"
        elif s.kind == "batchnorm":
            channels = str(s.in_channels)
        indent = "  " * row.depth
        lines.append(f"{indent}{row.path}\t{s.kind}\t{geometry}\t{channels}\t"
                     f"{_fmt(row.output_shape[1:])}")
    lines.append(f"# params {count_params(net)}")
    lines.append(f"# flops {count_flops(net, (batch,) + tuple(net.input_shape))}")
    return "\n".join(lines) + "\n"
