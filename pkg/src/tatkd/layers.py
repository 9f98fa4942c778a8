"""Parameter containers: a tiny module system over :mod:`tatkd.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

PROJECTOR_MODES = ("identity", "conv", "linear")


class Module:
    """Holds parameters (``Tensor`` with ``requires_grad``), buffers and children.

    Parameters and children are discovered from instance attributes in
    assignment order, which keeps state-dict key order stable.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module, BatchNormState)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> dict[str, tuple[BatchNormState, str]]:
        out: dict[str, tuple[BatchNormState, str]] = {}
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                out[f"{prefix}{name}.running_mean"] = (value, "running_mean")
                out[f"{prefix}{name}.running_var"] = (value, "running_var")
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for k, (holder, attr) in self.named_buffers().items():
            state[k] = getattr(holder, attr).copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, (holder, attr) in buffers.items():
            setattr(holder, attr, np.array(state[k], dtype=getattr(holder, attr).dtype))

    def astype(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        for holder, attr in self.named_buffers().values():
            setattr(holder, attr, getattr(holder, attr).astype(dtype))
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(T.DEFAULT_DTYPE), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, bias: bool = True, padding: int | None = None):
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        self.weight = _param(rng.normal(0.0, std, size=(kernel, kernel, cin, cout)))
        self.bias = _param(np.zeros(cout)) if bias else None
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.scale = _param(np.ones(channels))
        self.shift = _param(np.zeros(channels))
        self.stats = BatchNormState(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.scale, self.shift, self.stats, training=self.training)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, cout)))
        self.bias = _param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Projector(Module):
    """One of the feature projectors used by the correlation loss.

    ``identity`` passes the map through, ``conv`` is a 3x3 convolution
    followed by batch norm, ``linear`` is a 1x1 convolution with bias.
    """

    def __init__(self, mode: str, cin: int, cout: int, rng: np.random.Generator):
        if mode not in PROJECTOR_MODES:
            raise ValueError(f"unknown projector mode {mode!r}; expected one of {PROJECTOR_MODES}")
        if mode == "identity" and cin != cout:
            raise ValueError(f"identity projector needs matching channels, got {cin} -> {cout}")
        self.mode = mode
        self.in_channels = cin
        self.out_channels = cout
        if mode == "conv":
            self.conv = Conv2d(cin, cout, 3, rng, bias=False)
            self.bn = BatchNorm2d(cout)
        elif mode == "linear":
            self.conv = Conv2d(cin, cout, 1, rng, bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "identity":
            return x
        if x.shape[-1] != self.in_channels:
            raise T.ShapeError(f"projector expects {self.in_channels} channels, got {x.shape}")
        y = self.conv(x)
        return self.bn(y) if self.mode == "conv" else y


class ProjectorSet(Module):
    """theta (teacher), gamma (student, correlation) and phi (student, aggregation)."""

    def __init__(self, theta: Projector, gamma: Projector, phi: Projector):
        if gamma.out_channels != theta.out_channels:
            raise ValueError(
                f"gamma output channels {gamma.out_channels} != theta output channels {theta.out_channels}"
            )
        if phi.out_channels != theta.out_channels:
            raise ValueError(f"phi output channels {phi.out_channels} != target channels {theta.out_channels}")
        self.theta = theta
        self.gamma = gamma
        self.phi = phi

    @property
    def modes(self) -> tuple[str, str, str]:
        return self.theta.mode, self.gamma.mode, self.phi.mode

    @classmethod
    def identity(cls, channels: int) -> "ProjectorSet":
        rng = np.random.default_rng(0)
        return cls(*(Projector("identity", channels, channels, rng) for _ in range(3)))
