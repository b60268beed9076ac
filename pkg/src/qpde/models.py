"""Neural surrogates for the time-stepping operator: FNO-1D and UNet-1D.

Both are assembled from engine ops so that every multiplication-backed layer
is enumerable: ``Model.mac_layers()`` lists them in execution order (the
quant module attaches quantizers to all but the first and last; the cost
module prices them), and ``Model.op_plan(n)`` lists every op a forward pass
at spatial size ``n`` executes, including the addition-type ones.

Input layout is [channels, n] or [batch, channels, n] with
channels = input_steps * in_fields; the output carries
output_steps * out_fields channels (temporal bundling packs the predicted
steps into channels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine, spectral
from .engine import Tensor
from .errors import ConfigurationError, DimensionError

ARCHITECTURES = ("fno1d", "unet1d")
UNET_DEPTH = 3  # down/up blocks; spatial size must divide by 2**depth
FNO_PROJECTION_CHANNELS = 128  # hidden width of the two-layer projection head


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    grid_size: int
    in_fields: int = 1
    out_fields: int = 1
    input_steps: int = 1
    output_steps: int = 1
    layers: int = 4            # FNO: number of spectral blocks
    width: int = 128           # FNO: channel width
    modes: int = 16            # FNO: retained Fourier modes
    hidden_channels: int = 8   # UNet: stem width

    @property
    def in_channels(self) -> int:
        return self.in_fields * self.input_steps

    @property
    def out_channels(self) -> int:
        return self.out_fields * self.output_steps

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.grid_size < 2:
            raise ConfigurationError(f"grid size {self.grid_size} too small")
        if min(self.in_fields, self.out_fields, self.input_steps, self.output_steps) < 1:
            raise ConfigurationError("field/step counts must be positive")
        if self.architecture == "fno1d":
            spectral.require_pow2(self.grid_size, "FNO grid size")
            if self.modes > self.grid_size // 2 + 1:
                raise ConfigurationError(
                    f"modes={self.modes} exceeds {self.grid_size // 2 + 1} "
                    f"bins of an N={self.grid_size} grid")
            if self.layers < 1 or self.width < 1:
                raise ConfigurationError("FNO needs at least one layer and channel")
        else:
            if self.grid_size % (2 ** UNET_DEPTH):
                raise ConfigurationError(
                    f"UNet grid size must divide by {2 ** UNET_DEPTH}, got {self.grid_size}")
            if self.hidden_channels < 1:
                raise ConfigurationError("UNet needs at least one hidden channel")


@dataclass
class PlanOp:
    """One op of a forward pass at a fixed spatial size, for cost accounting."""

    name: str
    kind: str            # conv | spectral_mix | rfft | irfft | gelu | add | group_norm | move
    points: int = 0      # spatial points the op produces (conv) or transforms (fft)
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    bias: bool = False
    modes: int = 0
    elements: int = 0    # for addition-type ops


class Conv1d:
    """Learned 1-D convolution layer (kernel 1 layers double as pointwise linear)."""

    kind = "conv"

    def __init__(self, name: str, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int = 1, padding: str = "zero", stride: int = 1):
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.padding, self.stride = padding, stride
        bound = 1.0 / math.sqrt(in_ch * kernel)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel)),
                             dtype=np.float32, requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(out_ch,)),
                           dtype=np.float32, requires_grad=True)
        self.quant = None
        self._observer = None

    def forward(self, x: Tensor) -> Tensor:
        if self._observer is not None:
            self._observer.append(np.asarray(x.data))
        w = self.weight
        if self.quant is not None and self.quant.enabled:
            x = self.quant.input_q(x)
            w = self.quant.weight_q(w)
        return engine.conv1d(x, w, self.bias, padding=self.padding, stride=self.stride)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def plan(self, n: int) -> list[PlanOp]:
        return [PlanOp(self.name, "conv", points=n // self.stride, in_ch=self.in_ch,
                       out_ch=self.out_ch, kernel=self.kernel, bias=True)]


class SpectralConv1d:
    """FFT -> keep lowest modes -> learned complex channel mixing -> inverse FFT.

    Complex weights are packed as one real tensor [out, in, 2, modes] and share
    a single symmetric quantizer; the activation quantizer observes the
    truncated spectral coefficients that feed the mixing einsum.
    """

    kind = "spectral"

    def __init__(self, name: str, rng: np.random.Generator, in_ch: int, out_ch: int,
                 modes: int):
        self.name = name
        self.in_ch, self.out_ch, self.modes = in_ch, out_ch, modes
        scale = 1.0 / (in_ch * out_ch)
        self.weight = Tensor(rng.uniform(0.0, scale, size=(out_ch, in_ch, 2, modes)),
                             dtype=np.float32, requires_grad=True)
        self.quant = None
        self._observer = None

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[-1]
        cx = spectral.rfft(x)
        cx = spectral.truncate_modes(cx, self.modes)
        if self._observer is not None:
            self._observer.append(np.asarray(cx.packed.data))
        w = self.weight
        if self.quant is not None and self.quant.enabled:
            cx = spectral.ComplexTensor(self.quant.input_q(cx.packed), cx.n_signal)
            w = self.quant.weight_q(w)
        out = spectral.spectral_mix(cx, w)
        out = spectral.pad_modes(out, n // 2 + 1)
        return spectral.irfft(out, n)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight)]

    def plan(self, n: int) -> list[PlanOp]:
        m_eff = min(self.modes, n // 2 + 1)
        return [
            PlanOp(f"{self.name}.rfft", "rfft", points=n, in_ch=self.in_ch),
            PlanOp(self.name, "spectral_mix", modes=m_eff, in_ch=self.in_ch,
                   out_ch=self.out_ch),
            PlanOp(f"{self.name}.irfft", "irfft", points=n, in_ch=self.out_ch),
        ]


class GroupNorm:
    kind = "norm"

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.groups = math.gcd(8, channels)
        self.weight = Tensor(np.ones(channels), dtype=np.float32, requires_grad=True)
        self.bias = Tensor(np.zeros(channels), dtype=np.float32, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return engine.group_norm(x, self.groups, self.weight, self.bias)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def plan(self, n: int) -> list[PlanOp]:
        return [PlanOp(self.name, "group_norm", elements=self.channels * n)]


class Model:
    """Base: ordered layers, stable parameter names, layer enumeration."""

    architecture = "?"

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.regime = None
        self._mac: list = []

    def mac_layers(self) -> list:
        return list(self._mac)

    def parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def op_plan(self, n_points: int) -> list[PlanOp]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            if name not in arrays:
                raise ConfigurationError(f"missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise DimensionError(f"parameter {name!r}: shape {arrays[name].shape} "
                                     f"does not match {t.shape}")
            t.data = np.array(arrays[name], dtype=t.data.dtype)

    def _check_input(self, x: Tensor) -> None:
        want = self.spec.in_channels
        got = x.shape[-2] if x.ndim >= 2 else -1
        if x.ndim not in (2, 3) or got != want:
            raise DimensionError(
                f"expected [{want}, n] or [batch, {want}, n] input, got {x.shape}")


class FNO1d(Model):
    architecture = "fno1d"

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        w, m = spec.width, spec.modes
        self.fc0 = Conv1d("fc0", rng, spec.in_channels, w)
        self.blocks = []
        for i in range(spec.layers):
            sc = SpectralConv1d(f"block{i}.spectral", rng, w, w, m)
            pw = Conv1d(f"block{i}.pointwise", rng, w, w)
            self.blocks.append((sc, pw))
        self.fc1 = Conv1d("fc1", rng, w, FNO_PROJECTION_CHANNELS)
        self.fc2 = Conv1d("fc2", rng, FNO_PROJECTION_CHANNELS, spec.out_channels)
        self._mac = [self.fc0] + [l for blk in self.blocks for l in blk] + [self.fc1, self.fc2]

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        x = self.fc0.forward(x)
        last = len(self.blocks) - 1
        for i, (sc, pw) in enumerate(self.blocks):
            x = engine.add(sc.forward(x), pw.forward(x))
            if i != last:
                x = engine.gelu(x)
        x = engine.gelu(self.fc1.forward(x))
        return self.fc2.forward(x)

    def parameters(self):
        out = []
        for layer in self._mac:
            out.extend(layer.parameters())
        return out

    def op_plan(self, n: int) -> list[PlanOp]:
        w = self.spec.width
        plan = self.fc0.plan(n)
        last = len(self.blocks) - 1
        for i, (sc, pw) in enumerate(self.blocks):
            plan += sc.plan(n)
            plan += pw.plan(n)
            plan.append(PlanOp(f"block{i}.residual", "add", elements=w * n))
            if i != last:
                plan.append(PlanOp(f"block{i}.gelu", "gelu", elements=w * n))
        plan += self.fc1.plan(n)
        plan.append(PlanOp("fc1.gelu", "gelu", elements=FNO_PROJECTION_CHANNELS * n))
        plan += self.fc2.plan(n)
        return plan


class _DoubleConv:
    """conv3-norm-gelu twice; the UNet's basic block."""

    def __init__(self, name: str, rng, in_ch: int, out_ch: int):
        self.name = name
        self.conv1 = Conv1d(f"{name}.conv1", rng, in_ch, out_ch, kernel=3)
        self.norm1 = GroupNorm(f"{name}.norm1", out_ch)
        self.conv2 = Conv1d(f"{name}.conv2", rng, out_ch, out_ch, kernel=3)
        self.norm2 = GroupNorm(f"{name}.norm2", out_ch)
        self.out_ch = out_ch

    def forward(self, x):
        x = engine.gelu(self.norm1.forward(self.conv1.forward(x)))
        return engine.gelu(self.norm2.forward(self.conv2.forward(x)))

    def mac(self):
        return [self.conv1, self.conv2]

    def layers(self):
        return [self.conv1, self.norm1, self.conv2, self.norm2]

    def plan(self, n):
        plan = []
        for conv, norm in ((self.conv1, self.norm1), (self.conv2, self.norm2)):
            plan += conv.plan(n)
            plan += norm.plan(n)
            plan.append(PlanOp(f"{norm.name}.gelu", "gelu", elements=self.out_ch * n))
        return plan


class UNet1d(Model):
    """Three resolution levels, strided-conv downsampling, nearest-then-conv
    upsampling, skip connections by channel concatenation."""

    architecture = "unet1d"

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        h = spec.hidden_channels
        self.stem = _DoubleConv("stem", rng, spec.in_channels, h)
        self.downs = []
        c = h
        for i in range(UNET_DEPTH):
            stride_conv = Conv1d(f"down{i}.pool", rng, c, c, kernel=3, stride=2)
            dc = _DoubleConv(f"down{i}.block", rng, c, 2 * c)
            self.downs.append((stride_conv, dc))
            c *= 2
        self.ups = []
        for i in range(UNET_DEPTH):
            shrink = Conv1d(f"up{i}.shrink", rng, c, c // 2, kernel=3)
            dc = _DoubleConv(f"up{i}.block", rng, c, c // 2)
            self.ups.append((shrink, dc))
            c //= 2
        self.head = Conv1d("head", rng, h, spec.out_channels)
        self._mac = self.stem.mac()
        for sc, dc in self.downs:
            self._mac += [sc] + dc.mac()
        for sh, dc in self.ups:
            self._mac += [sh] + dc.mac()
        self._mac.append(self.head)

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        n = x.shape[-1]
        if n % (2 ** UNET_DEPTH):
            raise ConfigurationError(f"UNet input length {n} must divide by {2 ** UNET_DEPTH}")
        skips = []
        x = self.stem.forward(x)
        for stride_conv, dc in self.downs:
            skips.append(x)
            x = dc.forward(stride_conv.forward(x))
        for (shrink, dc), skip in zip(self.ups, reversed(skips)):
            x = shrink.forward(engine.upsample_nearest(x, 2))
            x = dc.forward(engine.concat([x, skip], axis=-2))
        return self.head.forward(x)

    def parameters(self):
        out = []
        for blk in [self.stem] + [dc for _, dc in self.downs] + [dc for _, dc in self.ups]:
            for layer in blk.layers():
                out.extend(layer.parameters())
        for sc, _ in self.downs:
            out.extend(sc.parameters())
        for sh, _ in self.ups:
            out.extend(sh.parameters())
        out.extend(self.head.parameters())
        return out

    def op_plan(self, n: int) -> list[PlanOp]:
        plan = self.stem.plan(n)
        size = n
        for stride_conv, dc in self.downs:
            plan += stride_conv.plan(size)
            size //= 2
            plan += dc.plan(size)
        for shrink, dc in self.ups:
            plan.append(PlanOp(f"{shrink.name}.upsample", "move"))
            size *= 2
            plan += shrink.plan(size)
            plan.append(PlanOp(f"{dc.name}.skip", "move"))
            plan += dc.plan(size)
        plan += self.head.plan(size)
        return plan


def build_model(spec: ModelSpec, rng_seed: int) -> Model:
    """Build a surrogate with deterministic seed-derived initialization.

    FNO-1D parameter count (documented closed form):
        (C_in*W + W) + L*(2*W*W*M) + L*(W*W + W) + (W*P + P) + (P*C_out + C_out)
    with W = width, M = modes, L = layers, P = 128 projection channels,
    C_in = in_fields*input_steps, C_out = out_fields*output_steps.
    """
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    if spec.architecture == "fno1d":
        return FNO1d(spec, rng)
    return UNet1d(spec, rng)


def fno_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of the FNO-1D builder (see build_model)."""
    w, m, l, p = spec.width, spec.modes, spec.layers, FNO_PROJECTION_CHANNELS
    ci, co = spec.in_channels, spec.out_channels
    return (ci * w + w) + l * (2 * w * w * m) + l * (w * w + w) + (w * p + p) + (p * co + co)
