"""Declarative generator / discriminator / critic architectures.

A :class:`NetworkSpec` is a plain list of layers with enough information to
propagate shapes and count parameters analytically. ``spec.build()`` turns it
into a torch module whose structure mirrors the list one-to-one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from .validation import fingerprint

LAYER_KINDS = (
    "conv",
    "conv_transpose",
    "dense",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "flatten",
    "reshape",
    "dropout",
)

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int | str = 0
    bias: bool = False
    target_shape: tuple[int, ...] = ()
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding == "same" and self.kind != "conv_transpose":
            raise ValueError("'same' padding is only supported for transposed convs")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list plus the conventions needed to compare against a layer summary.

    ``count_bn_statistics`` adds the running mean and variance to each
    batch-norm layer's parameter count (4 values per channel instead of 2),
    which is how Keras summaries report them. ``layout`` controls how
    :meth:`summary_shapes` prints feature-map shapes.
    """

    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...] = ()
    layout: str = "channels_first"
    count_bn_statistics: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes, channels-first, batch dimension excluded."""
        shapes = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _propagate(layer, shape)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.output_shapes()[-1] if self.layers else tuple(self.input_shape)

    def summary_shapes(self) -> list[tuple[int, ...]]:
        """Output shapes in this spec's layout, batch dimension excluded."""
        if self.layout == "channels_first":
            return self.output_shapes()
        return [s[1:] + s[:1] if len(s) == 3 else s for s in self.output_shapes()]

    def param_counts(self) -> list[int]:
        return [_count(layer, self.count_bn_statistics) for layer in self.layers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("metadata")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(
            LayerSpec(**{**l, "target_shape": tuple(l["target_shape"])}) for l in d["layers"]
        )
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=layers,
            layout=d["layout"],
            count_bn_statistics=d["count_bn_statistics"],
        )

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def build(self) -> "SpecNetwork":
        return SpecNetwork(self)


def param_count(spec: NetworkSpec) -> tuple[int, list[int]]:
    """Total and per-layer parameter counts, computed without instantiation."""
    per_layer = spec.param_counts()
    return sum(per_layer), per_layer


def _count(layer: LayerSpec, bn_statistics: bool) -> int:
    if layer.kind in ("conv", "conv_transpose"):
        weights = layer.in_channels * layer.out_channels * layer.kernel**2
        return weights + (layer.out_channels if layer.bias else 0)
    if layer.kind == "dense":
        return layer.in_channels * layer.out_channels + (layer.out_channels if layer.bias else 0)
    if layer.kind == "batch_norm":
        return layer.out_channels * (4 if bn_statistics else 2)
    return 0


def _propagate(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("conv", "conv_transpose", "batch_norm"):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"{kind} expects {layer.in_channels} channels, got shape {shape}")
    if kind == "conv":
        _, h, w = shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        return (layer.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if kind == "conv_transpose":
        _, h, w = shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        if p == "same":
            return (layer.out_channels, h * s, w * s)
        return (layer.out_channels, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
    if kind == "dense":
        if shape != (layer.in_channels,):
            raise ValueError(f"dense expects ({layer.in_channels},), got {shape}")
        return (layer.out_channels,)
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "reshape":
        if math.prod(layer.target_shape) != math.prod(shape):
            raise ValueError(f"cannot reshape {shape} to {layer.target_shape}")
        return tuple(layer.target_shape)
    return shape


# --------------------------------------------------------------------------
# architectures


def _conv_t(cin, cout, stride=2, padding=1, bias=False) -> LayerSpec:
    return LayerSpec("conv_transpose", cin, cout, 4, stride, padding, bias)


def _conv(cin, cout, stride=2, padding=1, bias=False) -> LayerSpec:
    return LayerSpec("conv", cin, cout, 4, stride, padding, bias)


def _bn(c) -> LayerSpec:
    return LayerSpec("batch_norm", c, c)


RELU = LayerSpec("relu")
LEAKY = LayerSpec("leaky_relu")


def build_dcgan_generator(z_dim: int = 100) -> NetworkSpec:
    """Five transposed-conv blocks taking ``(z_dim, 1, 1)`` noise to a 64x64 RGB image."""
    if z_dim < 1:
        raise ValueError("z_dim must be positive")
    layers = [_conv_t(z_dim, 512, stride=1, padding=0), _bn(512), RELU]
    for cin, cout in [(512, 256), (256, 128), (128, 64)]:
        layers += [_conv_t(cin, cout), _bn(cout), RELU]
    layers += [_conv_t(64, 3), LayerSpec("tanh")]
    return NetworkSpec("dcgan_generator", (z_dim, 1, 1), tuple(layers))


def build_dcgan_discriminator() -> NetworkSpec:
    layers = [_conv(3, 64), LEAKY]
    for cin, cout in [(64, 128), (128, 256), (256, 512)]:
        layers += [_conv(cin, cout), _bn(cout), LEAKY]
    layers += [_conv(512, 1, stride=1, padding=0), LayerSpec("sigmoid"), LayerSpec("flatten")]
    return NetworkSpec("dcgan_discriminator", (3, 64, 64), tuple(layers))


def build_wgan_generator(z_dim: int = 128) -> NetworkSpec:
    """Dense projection to 8x8x512 followed by upsampling to 64x64 RGB.

    The penultimate stage has only four channels; the final stride-1
    transposed conv uses 'same' padding to stay at 64x64, and a parameter-free
    tanh bounds the output to ``[-1, 1]``.
    """
    if z_dim < 1:
        raise ValueError("z_dim must be positive")
    layers = [
        LayerSpec("dense", z_dim, 512 * 8 * 8, bias=True),
        RELU,
        LayerSpec("reshape", target_shape=(512, 8, 8)),
    ]
    for cin, cout in [(512, 256), (256, 128), (128, 4)]:
        layers += [_conv_t(cin, cout), _bn(cout), RELU]
    layers += [_conv_t(4, 3, stride=1, padding="same", bias=True), LayerSpec("tanh")]
    return NetworkSpec(
        "wgan_gp_generator",
        (z_dim,),
        tuple(layers),
        layout="channels_last",
        count_bn_statistics=True,
    )


def build_wgan_critic(dropout: float = 0.3) -> NetworkSpec:
    """Three biased strided convs, dropout and an unbiased linear score (no sigmoid)."""
    layers = [
        _conv(3, 64, bias=True),
        LEAKY,
        _conv(64, 128, bias=True),
        LEAKY,
        _conv(128, 128, bias=True),
        LEAKY,
        LayerSpec("flatten"),
        LayerSpec("dropout", rate=dropout),
        LayerSpec("dense", 128 * 8 * 8, 1, bias=False),
    ]
    return NetworkSpec("wgan_gp_critic", (3, 64, 64), tuple(layers), layout="channels_last")


GENERATOR_BUILDERS = {"dcgan": build_dcgan_generator, "wgan_gp": build_wgan_generator}
DISCRIMINATOR_BUILDERS = {"dcgan": build_dcgan_discriminator, "wgan_gp": build_wgan_critic}
DEFAULT_Z_DIM = {"dcgan": 100, "wgan_gp": 128}


# --------------------------------------------------------------------------
# torch modules


class Reshape(nn.Module):
    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


class SameConvTranspose2d(nn.ConvTranspose2d):
    """Transposed conv whose output is exactly ``stride`` times the input size.

    The full (unpadded) output is cropped, putting the odd extra pixel at the
    bottom/right edge.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, stride, padding=0, bias=bias)

    def forward(self, x):
        out = super().forward(x)
        h, w = x.shape[-2] * self.stride[0], x.shape[-1] * self.stride[1]
        top = (out.shape[-2] - h) // 2
        left = (out.shape[-1] - w) // 2
        return out[..., top : top + h, left : left + w]


def _module(layer: LayerSpec) -> nn.Module:
    k = layer.kind
    if k == "conv":
        return nn.Conv2d(
            layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.padding,
            bias=layer.bias,
        )
    if k == "conv_transpose":
        if layer.padding == "same":
            return SameConvTranspose2d(
                layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.bias
            )
        return nn.ConvTranspose2d(
            layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.padding,
            bias=layer.bias,
        )
    if k == "dense":
        return nn.Linear(layer.in_channels, layer.out_channels, bias=layer.bias)
    if k == "batch_norm":
        return nn.BatchNorm2d(layer.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
    if k == "relu":
        return nn.ReLU()
    if k == "leaky_relu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if k == "tanh":
        return nn.Tanh()
    if k == "sigmoid":
        return nn.Sigmoid()
    if k == "flatten":
        return nn.Flatten()
    if k == "reshape":
        return Reshape(layer.target_shape)
    return nn.Dropout(layer.rate)


class SpecNetwork(nn.Module):
    """Torch realisation of a :class:`NetworkSpec`; rejects mis-shaped input."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.body = nn.Sequential(*(_module(layer) for layer in spec.layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = tuple(self.spec.input_shape)
        if x.ndim == 2 and len(expected) == 3 and expected[1:] == (1, 1):
            x = x[:, :, None, None]
        if tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"{self.spec.name} expects input of shape (batch, {', '.join(map(str, expected))}),"
                f" got {tuple(x.shape)}"
            )
        return self.body(x)


def init_weights(net: nn.Module, seed: int | torch.Generator = 0) -> nn.Module:
    """N(0, 0.02) weights for conv/dense layers, N(1, 0.02) batch-norm scale, zero shifts."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.normal_(m.weight, 0.0, INIT_STD, generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.normal_(m.weight, 1.0, INIT_STD, generator=gen)
                nn.init.zeros_(m.bias)
    return net


def conv_weights(net: nn.Module) -> torch.Tensor:
    """All conv and transposed-conv weights flattened into one vector."""
    parts = [
        m.weight.detach().reshape(-1)
        for m in net.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))
    ]
    return torch.cat(parts) if parts else torch.empty(0)
