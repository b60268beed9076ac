"""Resolution-altering operators and the scaled-model wrapper.

``resize_linear`` is endpoint-aligned (first and last samples map to the
domain endpoints, which keeps Dirichlet boundary values exact); periodic
data uses ``resize_circular`` instead, which treats the signal as wrapping
so a constant stays constant and the periodicity of the grid survives.
Both are linear maps, differentiable w.r.t. the input.

``ScaleSpec`` snaps a scale factor to the nearest size the architecture
supports (powers of two for the FNO, multiples of 2**depth for the UNet),
ties resolved downward. ``wrap_scaled_model`` produces a model that
downsamples its input and upsamples its output; multi-step rollouts keep
intermediate states at network resolution (see train.rollout).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor, accumulate_grad, op_node
from .errors import ConfigurationError

UNET_MULTIPLE = 8


def _resize_last_axis(x: Tensor, target: int, periodic: bool) -> Tensor:
    n = x.shape[-1]
    if target < 2:
        raise ConfigurationError(f"resize target must be >= 2, got {target}")
    if n < 2:
        raise ConfigurationError(f"resize source must have >= 2 points, got {n}")
    if periodic:
        pos = np.arange(target) * (n / target)
        i0 = np.floor(pos).astype(np.intp) % n
        i1 = (i0 + 1) % n
        w = (pos - np.floor(pos)).astype(x.dtype)
    else:
        pos = np.arange(target) * ((n - 1) / (target - 1))
        i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
        i1 = i0 + 1
        w = (pos - i0).astype(x.dtype)
    data = (1.0 - w) * x.data[..., i0] + w * x.data[..., i1]
    lead = int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
    engine._record("resize", 2 * lead * target, 4 * lead * target)

    def bw(g):
        if x.requires_grad:
            g2 = g.reshape(-1, target)
            acc = np.zeros((g2.shape[0], n), dtype=x.data.dtype)
            rows = np.arange(g2.shape[0])[:, None]
            np.add.at(acc, (rows, i0[None, :]), (1.0 - w) * g2)
            np.add.at(acc, (rows, i1[None, :]), w * g2)
            accumulate_grad(x, acc.reshape(x.shape))

    return op_node(data.astype(x.dtype), (x,), bw)


def resize_linear(u: Tensor, target: int) -> Tensor:
    """Endpoint-aligned linear interpolation along the last axis."""
    return _resize_last_axis(engine._wrap(u), target, periodic=False)


def resize_circular(u: Tensor, target: int) -> Tensor:
    """Linear interpolation with a virtual wrap sample (periodic grids)."""
    return _resize_last_axis(engine._wrap(u), target, periodic=True)


def resize_bilinear(u: Tensor, target: tuple[int, int]) -> Tensor:
    """Separable linear resize of the two trailing axes to (rows, cols)."""
    u = engine._wrap(u)
    if u.ndim < 2:
        raise ConfigurationError("bilinear resize needs at least two axes")
    rows, cols = target
    out = _resize_last_axis(u, cols, periodic=False)
    perm = list(range(out.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    out = engine.transpose(out, perm)
    out = _resize_last_axis(out, rows, periodic=False)
    return engine.transpose(out, perm)


def _snap(target: int, supported: list[int]) -> int:
    # nearest supported size; ties resolved downward
    best = supported[0]
    for s in supported[1:]:
        if abs(s - target) < abs(best - target) or (abs(s - target) == abs(best - target) and s < best):
            best = s
    return best


def supported_sizes(architecture: str, up_to: int) -> list[int]:
    if architecture == "fno1d":
        sizes = []
        s = 4
        while s <= up_to:
            sizes.append(s)
            s *= 2
        return sizes
    if architecture == "unet1d":
        return list(range(UNET_MULTIPLE, up_to + 1, UNET_MULTIPLE))
    raise ConfigurationError(f"unknown architecture {architecture!r}")


@dataclass(frozen=True)
class ScaleSpec:
    """A resolution-scaling setting: factor plus the snapped grid sizes."""

    factor: float
    input_size: int
    network_size: int
    periodic: bool = False

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise ConfigurationError(f"scale factor must lie in (0, 1], got {self.factor}")
        if self.factor == 1.0 and self.network_size != self.input_size:
            raise ConfigurationError("factor 1.0 must keep the input size")

    @property
    def identity(self) -> bool:
        return self.network_size == self.input_size

    @classmethod
    def for_model(cls, factor: float, input_size: int, architecture: str,
                  periodic: bool = False) -> "ScaleSpec":
        if not 0.0 < factor <= 1.0:
            raise ConfigurationError(f"scale factor must lie in (0, 1], got {factor}")
        if factor == 1.0:
            return cls(1.0, input_size, input_size, periodic)
        target = int(round(factor * input_size))
        sizes = supported_sizes(architecture, input_size)
        if not sizes:
            raise ConfigurationError(f"no supported network size below {input_size}")
        return cls(factor, input_size, _snap(target, sizes), periodic)


class ScaledModel:
    """Downsample -> model -> upsample, with gradients through the resizers."""

    def __init__(self, inner, scale: ScaleSpec):
        self.inner = inner
        self.scale = scale

    @property
    def spec(self):
        return self.inner.spec

    @property
    def architecture(self):
        return self.inner.architecture

    @property
    def regime(self):
        return self.inner.regime

    def downsample(self, x: Tensor) -> Tensor:
        if self.scale.identity:
            return x
        fn = resize_circular if self.scale.periodic else resize_linear
        return fn(x, self.scale.network_size)

    def upsample(self, x: Tensor) -> Tensor:
        if self.scale.identity:
            return x
        fn = resize_circular if self.scale.periodic else resize_linear
        return fn(x, self.scale.input_size)

    def forward(self, x: Tensor) -> Tensor:
        return self.upsample(self.inner.forward(self.downsample(x)))

    def mac_layers(self):
        return self.inner.mac_layers()

    def parameters(self):
        return self.inner.parameters()

    def op_plan(self, n_points: int):
        return self.inner.op_plan(n_points)


def wrap_scaled_model(model, scale: ScaleSpec) -> ScaledModel:
    if not scale.identity:
        sizes = supported_sizes(model.architecture, scale.input_size)
        if scale.network_size not in sizes:
            raise ConfigurationError(
                f"network size {scale.network_size} unsupported for {model.architecture}")
    return ScaledModel(model, scale)
