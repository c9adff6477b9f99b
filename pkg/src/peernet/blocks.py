"""Input blocks per modality and (2+1)D residual convolutional blocks."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from peernet import tensor as tn
from peernet.tensor import Tensor

INPUT_KINDS = ("input-rgb", "input-flow", "input-object")
BLOCK_KINDS = INPUT_KINDS + ("conv",)

# Residual modules per level at depth_scale=1. Every module holds three conv
# layers, giving 9/12/18/9 layers for levels 1-4.
MODULES_PER_LEVEL = {1: 3, 2: 4, 3: 6, 4: 3}
LAYERS_PER_MODULE = 3

INPUT_MODALITY = {"input-rgb": "rgb", "input-flow": "flow", "input-object": "object"}


@dataclass(frozen=True)
class BlockSpec:
    index: int
    level: int
    channels: int
    temporal_dilation: int = 1
    spatial_stride: int = 1
    kind: str = "conv"
    repeats: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"block {self.index}: unknown kind {self.kind!r}")
        if self.kind in INPUT_KINDS and self.level != 0:
            raise ValueError(f"block {self.index}: input blocks must be at level 0")
        if self.kind == "conv" and self.level < 1:
            raise ValueError(f"block {self.index}: conv blocks need level >= 1")
        if self.channels <= 0:
            raise ValueError(f"block {self.index}: channels must be positive")
        if self.temporal_dilation < 1 or self.spatial_stride < 1:
            raise ValueError(f"block {self.index}: dilation and stride must be >= 1")

    @property
    def is_input(self) -> bool:
        return self.kind in INPUT_KINDS


def seeded_rng(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``seed`` plus any mix of ints and strings."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(words)


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1

    @classmethod
    def create(cls, rng, name, kernel, cin, cout, stride=1, dilation=1) -> "ConvLayer":
        kt, kh, kw = kernel
        w = he_init(rng, (kt, kh, kw, cin, cout), kt * kh * kw * cin)
        return cls(
            tn.parameter(w, f"{name}/w"),
            tn.parameter(np.zeros(cout), f"{name}/b"),
            stride,
            dilation,
        )

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.weight.shape[:3]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[4]

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv3d(x, self.weight, self.bias, self.stride, self.dilation)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class ResidualModule:
    """Three-layer residual module.

    ``spatial-2d``: 1x1 -> 3x3 -> 1x1.
    ``spatiotemporal-2plus1d``: temporal 3 (dilated) -> 3x3 -> 1x1.
    """

    variant: str
    layers: list[ConvLayer]
    shortcut: ConvLayer | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for n, layer in enumerate(self.layers):
            y = layer(y)
            if n < len(self.layers) - 1:
                y = tn.relu(y)
        skip = self.shortcut(x) if self.shortcut is not None else x
        return tn.relu(tn.add(skip, y))

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        if self.shortcut is not None:
            params += self.shortcut.parameters()
        return params


def module_count(level: int, depth_scale: float = 1.0) -> int:
    if level not in MODULES_PER_LEVEL:
        raise ValueError(f"no conv block layout for level {level}")
    return max(1, math.ceil(MODULES_PER_LEVEL[level] * depth_scale - 1e-9))


@dataclass
class ConvBlock:
    spec: BlockSpec
    modules: list[ResidualModule] = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return self.spec.channels

    @property
    def out_channels(self) -> int:
        return self.spec.channels

    def conv_layer_count(self) -> int:
        """Main-path conv layers; shortcut projections are not counted."""
        return sum(len(m.layers) for m in self.modules)

    def conv_layers(self) -> list[ConvLayer]:
        out = []
        for m in self.modules:
            out += m.layers
            if m.shortcut is not None:
                out.append(m.shortcut)
        return out

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules for p in m.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ValueError(
                f"block {self.spec.index}: expected {self.in_channels} channels, got {x.shape[-1]}"
            )
        for m in self.modules:
            x = m(x)
        return x


def make_conv_block(spec: BlockSpec, depth_scale: float = 1.0, seed: int = 0) -> ConvBlock:
    if spec.kind != "conv":
        raise ValueError(f"block {spec.index}: make_conv_block needs a conv spec")
    n_modules = module_count(spec.level, depth_scale)
    rng = seeded_rng(seed, "block", spec.index)
    c = spec.channels
    modules = []
    for m in range(n_modules):
        stride = spec.spatial_stride if m == 0 else 1
        name = f"block{spec.index}/m{m}"
        if m % 2 == 0:
            variant = "spatial-2d"
            layers = [
                ConvLayer.create(rng, f"{name}/a", (1, 1, 1), c, c),
                ConvLayer.create(rng, f"{name}/b", (1, 3, 3), c, c, stride=stride),
                ConvLayer.create(rng, f"{name}/c", (1, 1, 1), c, c),
            ]
        else:
            variant = "spatiotemporal-2plus1d"
            layers = [
                ConvLayer.create(rng, f"{name}/a", (3, 1, 1), c, c, dilation=spec.temporal_dilation),
                ConvLayer.create(rng, f"{name}/b", (1, 3, 3), c, c, stride=stride),
                ConvLayer.create(rng, f"{name}/c", (1, 1, 1), c, c),
            ]
        shortcut = None
        if stride != 1:
            shortcut = ConvLayer.create(rng, f"{name}/proj", (1, 1, 1), c, c, stride=stride)
        modules.append(ResidualModule(variant, layers, shortcut))
    return ConvBlock(spec, modules)


@dataclass
class InputBlock:
    """Stem for one modality.

    rgb: 7x7 stride-2 spatial conv, size-5 temporal conv, 2x2 max pool.
    flow: 7x7 stride-2 spatial conv, 2x2 max pool.
    object: 4x4 max pool only, so it has no parameters.
    """

    spec: BlockSpec
    in_channels: int
    layers: list[ConvLayer] = field(default_factory=list)
    pool: int = 2

    @property
    def modality(self) -> str:
        return INPUT_MODALITY[self.spec.kind]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.in_channels

    def conv_layer_count(self) -> int:
        return len(self.layers)

    def conv_layers(self) -> list[ConvLayer]:
        return list(self.layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ValueError(
                f"block {self.spec.index}: expected {self.in_channels} input channels, got {x.shape[-1]}"
            )
        for layer in self.layers:
            x = tn.relu(layer(x))
        return tn.max_pool_spatial(x, self.pool)


def make_input_block(spec: BlockSpec, in_channels: int, seed: int = 0) -> InputBlock:
    """Build the stem for ``spec.kind``; ``in_channels`` is the raw modality width."""
    if not spec.is_input:
        raise ValueError(f"block {spec.index}: make_input_block needs an input kind, got {spec.kind!r}")
    rng = seeded_rng(seed, "block", spec.index)
    name = f"block{spec.index}"
    c = spec.channels
    if spec.kind == "input-object":
        return InputBlock(spec, in_channels, [], pool=4)
    layers = [ConvLayer.create(rng, f"{name}/spatial", (1, 7, 7), in_channels, c, stride=2)]
    if spec.kind == "input-rgb":
        layers.append(
            ConvLayer.create(rng, f"{name}/temporal", (5, 1, 1), c, c, dilation=spec.temporal_dilation)
        )
    return InputBlock(spec, in_channels, layers, pool=2)


def block_forward(block, x: Tensor) -> Tensor:
    return block(x)
