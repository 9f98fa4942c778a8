"""Toy teacher/student convnets and projector construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Linear, Module, Projector, ProjectorSet
from .tensor import Tensor

HEADS = ("classification", "segmentation")


@dataclass(frozen=True)
class ConvNetSpec:
    """Stack of stride-1, pad-1 ``kernel x kernel`` conv layers plus a head."""

    in_channels: int
    channels: tuple[int, ...]
    num_classes: int
    head: str = "classification"
    kernel: int = 3
    batchnorm: bool = True

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]


# preset name -> layer widths
PRESETS: dict[str, tuple[int, ...]] = {
    "fig1-teacher": (32, 32, 32),
    "fig1-student": (16, 16),
    # same depth as fig1-student but teacher-width, so identity gamma is legal
    "fig1-student-c32": (32, 32),
}


def preset_spec(name: str, in_channels: int, num_classes: int, head: str = "classification") -> ConvNetSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ConvNetSpec(in_channels, PRESETS[name], num_classes, head)


def parameter_count(spec: ConvNetSpec) -> int:
    """Closed-form parameter count for :func:`build_convnet`."""
    total = 0
    cin = spec.in_channels
    for cout in spec.channels:
        total += spec.kernel**2 * cin * cout
        total += 2 * cout if spec.batchnorm else cout
        cin = cout
    return total + cin * spec.num_classes + spec.num_classes


class ConvNet(Module):
    def __init__(self, spec: ConvNetSpec, seed: int):
        if spec.depth == 0:
            raise ValueError("a convnet needs at least one conv layer")
        if spec.head not in HEADS:
            raise ValueError(f"unknown head {spec.head!r}")
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        convs, norms = [], []
        cin = spec.in_channels
        for cout in spec.channels:
            convs.append(Conv2d(cin, cout, spec.kernel, rng, bias=not spec.batchnorm))
            if spec.batchnorm:
                norms.append(BatchNorm2d(cout))
            cin = cout
        self.convs = convs
        self.norms = norms
        if spec.head == "classification":
            self.head = Linear(cin, spec.num_classes, rng)
        else:
            self.head = Conv2d(cin, spec.num_classes, 1, rng, bias=True)

    def features(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.in_channels:
            raise T.ShapeError(f"input has {x.shape[-1]} channels, network expects {self.spec.in_channels}")
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.norms:
                h = self.norms[i](h)
            h = T.relu(h)
        return h

    def classify(self, features: Tensor) -> Tensor:
        if self.spec.head == "classification":
            pooled = T.mean(features, axis=(-3, -2))
            return self.head(pooled)
        return self.head(features)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.features(x)
        return feats, self.classify(feats)


def build_convnet(spec: ConvNetSpec, seed: int) -> ConvNet:
    """He-initialised network, bit-identical for equal ``(spec, seed)``."""
    return ConvNet(spec, seed)


def forward_features(model: ConvNet, x: Tensor) -> tuple[Tensor, Tensor]:
    """Backbone output (the distillation layer) and head logits."""
    return model(x)


def receptive_field(num_layers: int, kernel: int, stride: int = 1) -> int:
    if min(num_layers, kernel, stride) < 1:
        raise ValueError("receptive_field arguments must be >= 1")
    r, jump = 1, 1
    for _ in range(num_layers):
        r += (kernel - 1) * jump
        jump *= stride
    return r


def build_projectors(
    mode_theta: str,
    mode_gamma: str,
    mode_phi: str,
    in_channels_t: int,
    in_channels_s: int,
    out_channels: int,
    seed: int,
) -> ProjectorSet:
    """Independent theta/gamma/phi projectors; identity modes demand equal channels."""
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    return ProjectorSet(
        Projector(mode_theta, in_channels_t, out_channels, rngs[0]),
        Projector(mode_gamma, in_channels_s, out_channels, rngs[1]),
        Projector(mode_phi, in_channels_s, out_channels, rngs[2]),
    )
