"""Fixed-point quantization of weights and activations.

A quantizer maps reals onto an unsigned integer grid with ``2**bits`` levels
through scale ``s`` and zero-point ``z``:

    x_int = clamp(round(x / s) + z, 0, 2**bits - 1)
    x_hat = s * (x_int - z)

Weights use symmetric grids (z pinned at mid-level so the grid straddles
zero); activations use asymmetric grids with a free zero-point. Rounding is
to nearest with ties away from zero, which is deterministic across
platforms.

``fake_quant`` runs quantize-then-dequantize in real arithmetic and carries
gradients: the straight-through estimator for the input (identity inside
[q_min, q_max], zero outside) and the exact piecewise derivatives of the
forward for ``s`` and ``z`` (the rounded level inside the grid, the clipped
boundary level outside), so every quantizer gradient agrees with central
finite differences away from rounding boundaries. The conventional
learned-step-size gradient damping 1/sqrt(n * q_max_level) is applied as a
per-parameter learning-rate factor in the optimizer, not inside the op.

Range calibration is an explicit grid search minimizing the mean squared
fake-quantization error over candidate ranges: 101 max values linearly
spaced over [0.1, 1.2] times the observed extreme (and a matching candidate
set for the minimum in the asymmetric case).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor, accumulate_grad, op_node
from .errors import ConfigurationError, ContractError

VALID_BITS = (4, 8, 16)
VALID_REGIMES = ((4, 4), (4, 8), (8, 8), (8, 16), (16, 16))

CALIB_CANDIDATES = 101
CALIB_SPAN = (0.1, 1.2)
CALIB_MAX_SAMPLES = 16384


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero."""
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantizerParams:
    """A fixed-point grid: scale, zero-point, bitwidth."""

    s: float
    z: int
    bits: int
    symmetric: bool
    learnable: bool = False

    def __post_init__(self):
        if self.s <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.s}")
        if self.bits not in VALID_BITS:
            raise ConfigurationError(f"bitwidth must be one of {VALID_BITS}, got {self.bits}")
        if not 0 <= self.z <= self.n_levels - 1:
            raise ConfigurationError(f"zero-point {self.z} outside [0, {self.n_levels - 1}]")
        if self.symmetric and self.z != 2 ** (self.bits - 1):
            raise ConfigurationError("symmetric quantizers pin z at 2**(bits-1)")

    @property
    def n_levels(self) -> int:
        return 2 ** self.bits

    @property
    def q_min(self) -> float:
        return -self.s * self.z

    @property
    def q_max(self) -> float:
        return self.s * (self.n_levels - 1 - self.z)


@dataclass(frozen=True)
class QuantRegime:
    """Weight/activation bitwidth pair, e.g. w4a8."""

    b_w: int
    b_a: int

    def __post_init__(self):
        if (self.b_w, self.b_a) not in VALID_REGIMES:
            raise ConfigurationError(
                f"regime w{self.b_w}a{self.b_a} not in "
                + ", ".join(f"w{w}a{a}" for w, a in VALID_REGIMES))

    @property
    def label(self) -> str:
        return f"w{self.b_w}a{self.b_a}"

    @classmethod
    def parse(cls, text: str) -> "QuantRegime":
        t = text.strip().lower()
        if not t.startswith("w") or "a" not in t:
            raise ConfigurationError(f"cannot parse regime {text!r} (expected wXaY)")
        w, a = t[1:].split("a", 1)
        return cls(int(w), int(a))


def quantize(x, p: QuantizerParams) -> np.ndarray:
    """Map reals onto the integer grid (round, shift, clamp). Total function."""
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / p.s) + p.z
    return np.clip(q, 0, p.n_levels - 1).astype(np.int64)


def dequantize(x_int, p: QuantizerParams) -> np.ndarray:
    x_int = np.asarray(x_int)
    if x_int.size and (x_int.min() < 0 or x_int.max() > p.n_levels - 1):
        raise ContractError(
            f"integer values outside [0, {p.n_levels - 1}] for a {p.bits}-bit grid")
    return p.s * (x_int.astype(np.float64) - p.z)


class LiveQuantizer:
    """Runtime quantizer state; scale (and zero-point) may be trainable tensors."""

    def __init__(self, params: QuantizerParams, learnable: bool = False):
        self.bits = params.bits
        self.symmetric = params.symmetric
        self.learnable = learnable
        self.s = Tensor(np.asarray(params.s, dtype=np.float64), requires_grad=learnable)
        self.z = Tensor(np.asarray(float(params.z), dtype=np.float64),
                        requires_grad=learnable and not params.symmetric)

    def __call__(self, x: Tensor) -> Tensor:
        return fake_quant(x, self)

    def clamp_scale(self, floor: float = 1e-12) -> None:
        if float(self.s.data) < floor:
            self.s.data = np.asarray(floor, dtype=self.s.data.dtype)

    def trainable(self) -> list[Tensor]:
        out = [t for t in (self.s, self.z) if t.requires_grad]
        return out

    def grad_scale(self, n_elements: int) -> float:
        # learned-step-size damping: 1/sqrt(n * q_max_level)
        return 1.0 / np.sqrt(max(1, n_elements) * (2 ** self.bits - 1))

    def snapshot(self) -> QuantizerParams:
        z = 2 ** (self.bits - 1) if self.symmetric else int(
            np.clip(round(float(self.z.data)), 0, 2 ** self.bits - 1))
        return QuantizerParams(float(self.s.data), z, self.bits, self.symmetric,
                               learnable=self.learnable)


@dataclass
class QuantizedLayer:
    """Quantizer pair attached to one multiplication-backed layer."""

    layer: object
    weight_q: LiveQuantizer
    input_q: LiveQuantizer
    enabled: bool = True


def fake_quant(x: Tensor, q) -> Tensor:
    """Quantize-then-dequantize with straight-through / piecewise gradients."""
    if isinstance(q, QuantizerParams):
        return _fake_quant_op(x, Tensor(np.asarray(q.s)), Tensor(np.asarray(float(q.z))),
                              q.bits)
    return _fake_quant_op(x, q.s, q.z, q.bits)


def _fake_quant_op(x: Tensor, s: Tensor, z: Tensor, bits: int) -> Tensor:
    top = 2 ** bits - 1
    sd = float(s.data)
    zd = float(z.data)
    xd = x.data
    r = round_half_away(xd / sd)
    c = r + zd
    below = c < 0.0
    above = c > top
    cc = np.clip(c, 0.0, top)
    data = (sd * (cc - zd)).astype(xd.dtype)

    def bw(g):
        if x.requires_grad:
            q_min = -sd * zd
            q_max = sd * (top - zd)
            accumulate_grad(x, g * ((xd >= q_min) & (xd <= q_max)))
        if s.requires_grad:
            ds = np.where(below, -zd, np.where(above, top - zd, r))
            accumulate_grad(s, np.asarray(np.sum(g * ds, dtype=np.float64),
                                          dtype=s.data.dtype))
        if z.requires_grad:
            dz = np.where(below | above, -sd, 0.0)
            accumulate_grad(z, np.asarray(np.sum(g * dz, dtype=np.float64),
                                          dtype=z.data.dtype))

    return op_node(data, (x, s, z), bw)


# -- range calibration --------------------------------------------------------

def _fq_mse(x: np.ndarray, scales: np.ndarray, zeros: np.ndarray, bits: int) -> np.ndarray:
    """Mean squared fake-quantization error of x for each (scale, zero) pair."""
    top = 2 ** bits - 1
    out = np.empty(len(scales))
    chunk = max(1, int(2**22 // max(1, x.size)))
    for lo in range(0, len(scales), chunk):
        s = scales[lo:lo + chunk, None]
        z = zeros[lo:lo + chunk, None]
        q = np.clip(round_half_away(x[None, :] / s) + z, 0, top)
        err = s * (q - z) - x[None, :]
        out[lo:lo + chunk] = np.mean(err * err, axis=1)
    return out


def _subsample(x: np.ndarray, cap: int = CALIB_MAX_SAMPLES) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).ravel()
    if flat.size <= cap:
        return flat
    stride = flat.size // cap
    return flat[:: stride][:cap]


def calibrate_range(samples, bits: int, symmetric: bool) -> QuantizerParams:
    """Grid-search the (s, z) minimizing mean squared fake-quantization error."""
    flat = _subsample(samples)
    if flat.size == 0:
        raise ConfigurationError("calibration needs a non-empty sample batch")
    lo_obs = float(flat.min())
    hi_obs = float(flat.max())
    if lo_obs == 0.0 and hi_obs == 0.0:
        # degenerate input: fall back to a unit grid
        z = 2 ** (bits - 1) if symmetric else 0
        return QuantizerParams(1.0, z, bits, symmetric)
    frac = np.linspace(CALIB_SPAN[0], CALIB_SPAN[1], CALIB_CANDIDATES)
    if symmetric:
        z = 2 ** (bits - 1)
        amax = max(abs(lo_obs), abs(hi_obs))
        scales = amax * frac / (2 ** (bits - 1) - 1)
        zeros = np.full_like(scales, float(z))
        best = int(np.argmin(_fq_mse(flat, scales, zeros, bits)))
        return QuantizerParams(float(scales[best]), z, bits, True)
    top = 2 ** bits - 1
    lo_cand = lo_obs * frac
    hi_cand = hi_obs * frac
    los, his = np.meshgrid(lo_cand, hi_cand, indexing="ij")
    los, his = los.ravel(), his.ravel()
    keep = his - los > 0
    los, his = los[keep], his[keep]
    scales = (his - los) / top
    zeros = np.clip(round_half_away(-los / scales), 0, top)
    best = int(np.argmin(_fq_mse(flat, scales, zeros, bits)))
    return QuantizerParams(float(scales[best]), int(zeros[best]), bits, False)


# -- model attachment ---------------------------------------------------------

def quantizable_mask(n_layers: int) -> list[bool]:
    """First and last multiplication-backed layers stay unquantized."""
    if n_layers < 3:
        raise ConfigurationError(
            f"need at least 3 quantizable layers to exempt first/last, got {n_layers}")
    return [False] + [True] * (n_layers - 2) + [False]


def collect_layer_inputs(model, batches) -> dict[str, np.ndarray]:
    """Run forward passes recording the tensor each MAC layer multiplies."""
    mac = model.mac_layers()
    for layer in mac:
        layer._observer = []
    try:
        with engine.no_grad():
            for x in batches:
                model.forward(x if isinstance(x, Tensor) else Tensor(np.asarray(x)))
        return {layer.name: np.concatenate([_subsample(a) for a in layer._observer])
                for layer in mac}
    finally:
        for layer in mac:
            layer._observer = None


def calibrate_model(model, batches, regime: QuantRegime) -> dict[str, tuple[QuantizerParams, QuantizerParams]]:
    """Per-layer independent range calibration for weights and layer inputs."""
    inputs = collect_layer_inputs(model, batches)
    out = {}
    for layer, quantize_it in zip(model.mac_layers(), quantizable_mask(len(model.mac_layers()))):
        if not quantize_it:
            continue
        w_qp = calibrate_range(layer.weight.data, regime.b_w, symmetric=True)
        in_qp = calibrate_range(inputs[layer.name], regime.b_a, symmetric=False)
        out[layer.name] = (w_qp, in_qp)
    return out


def attach_quantizers(model, regime: QuantRegime, calibration=None, learnable: bool = False):
    """Attach weight (symmetric) and input (asymmetric) quantizers to every
    MAC layer except the first and last. Mutates and returns the model."""
    mac = model.mac_layers()
    mask = quantizable_mask(len(mac))
    for layer, quantize_it in zip(mac, mask):
        if not quantize_it:
            layer.quant = None
            continue
        if calibration is not None and layer.name in calibration:
            w_qp, in_qp = calibration[layer.name]
            if w_qp.bits != regime.b_w or in_qp.bits != regime.b_a:
                raise ConfigurationError(
                    f"calibration bitwidths ({w_qp.bits},{in_qp.bits}) do not match {regime.label}")
        else:
            w_qp = calibrate_range(layer.weight.data, regime.b_w, symmetric=True)
            in_qp = QuantizerParams(1.0, 0, regime.b_a, symmetric=False)
        layer.quant = QuantizedLayer(
            layer=layer,
            weight_q=LiveQuantizer(w_qp, learnable=learnable),
            input_q=LiveQuantizer(in_qp, learnable=learnable),
            enabled=True,
        )
    model.regime = regime
    return model


def quantizer_tensors(model) -> list[tuple[Tensor, float]]:
    """Trainable quantizer tensors with their learned-step-size LR factors."""
    out = []
    for layer in model.mac_layers():
        q = getattr(layer, "quant", None)
        if q is None:
            continue
        for lq, n in ((q.weight_q, layer.weight.size), (q.input_q, layer.weight.size)):
            for t in lq.trainable():
                out.append((t, lq.grad_scale(n)))
    return out


def set_quantizers_enabled(model, enabled: bool) -> None:
    for layer in model.mac_layers():
        q = getattr(layer, "quant", None)
        if q is not None:
            q.enabled = enabled
