"""Inference-cost proxy: per-layer multiply/add counts weighted by bitwidths.

A layer with M multiplications, A additions, weight bits b_w and activation
bits b_a costs M*b_w*b_a + A*b_a. Unquantized layers (the first and last
multiplication-backed layers, FFTs, interpolation, and every addition-type
op) are priced as if they ran in 16-bit integers. FLOPs = sum(M + A) is
regime-independent; MACs pair one multiply with one add per MAC-backed
layer.

Counting conventions:

* linear/conv: M = in*out*points; A = M with bias (accumulation plus bias
  merge), A = M - out*points without.
* FFT: M = A = channels * N * ceil(log2 N), halved for the real-valued
  transform.
* spectral einsum: each retained mode mixes channels with complex
  multiplies (4 real multiplies + 2 real adds each) plus complex
  accumulation (2*(C_in-1)*C_out adds).
* interpolation: 2 multiplies + 4 adds per output point in 1D, three times
  that in 2D.
* activations, norms, and residual adds count one 16-bit addition per
  element; pure data movement (mode truncation, bit reversal, nearest
  upsampling, concatenation) is free.

``model_cost`` prices a rollout: the per-pass plan at network resolution
times the number of passes, plus one downsample and one upsample when the
model is scaled. With ``verify=True`` it executes an instrumented forward
pass and cross-checks the plan's multiply counts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import ConfigurationError, CostAccountingError
from .models import PlanOp
from .quant import QuantRegime, quantizable_mask

INT16 = 16
_MAC_KINDS = ("conv", "matmul", "spectral_mix")
_MOVE_KINDS = ("move",)
_ADDITION_KINDS = ("gelu", "add", "group_norm")


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str
    m: int
    a: int
    b_w: int = INT16
    b_a: int = INT16

    def cost(self) -> int:
        return self.m * self.b_w * self.b_a + self.a * self.b_a


def layer_cost(count: LayerCount) -> int:
    return count.cost()


@dataclass
class CostReport:
    lines: list[LayerCount] = field(default_factory=list)
    footnotes: list[str] = field(default_factory=list)

    @property
    def total_cost(self) -> int:
        return sum(l.cost() for l in self.lines)

    @property
    def flops(self) -> int:
        return sum(l.m + l.a for l in self.lines)

    @property
    def macs(self) -> int:
        return sum(min(l.m, l.a) for l in self.lines if l.kind in _MAC_KINDS)

    def to_table(self) -> str:
        rows = [f"{'layer':32} {'kind':14} {'M':>12} {'A':>12} {'b_w':>4} {'b_a':>4} {'cost':>16}"]
        for l in self.lines:
            rows.append(f"{l.name:32} {l.kind:14} {l.m:>12} {l.a:>12} "
                        f"{l.b_w:>4} {l.b_a:>4} {l.cost():>16}")
        rows.append(f"{'total':32} {'':14} {self.flops:>25} (FLOPs) {self.total_cost:>12}")
        rows += [f"note: {f}" for f in self.footnotes]
        return "\n".join(rows)

    def to_record(self) -> dict:
        return {"total_cost": self.total_cost, "flops": self.flops, "macs": self.macs}


# -- counting rules ---------------------------------------------------------------

def count_linear(in_features: int, out_features: int, spatial_points: int,
                 has_bias: bool) -> tuple[int, int]:
    if min(in_features, out_features, spatial_points) < 1:
        raise ConfigurationError("linear counts need positive dimensions")
    m = in_features * out_features * spatial_points
    a = m if has_bias else m - out_features * spatial_points
    return m, a


def count_fft(n: int, channels: int, real_valued: bool) -> tuple[int, int]:
    if n < 2:
        raise ConfigurationError(f"FFT length must be >= 2, got {n}")
    ops = channels * n * ((n - 1).bit_length())
    if real_valued:
        ops //= 2
    return ops, ops


def count_einsum_spectral(modes: int, c_in: int, c_out: int) -> tuple[int, int]:
    if modes == 0:
        return 0, 0
    m = modes * c_in * c_out * 4
    a = modes * (c_in * c_out * 2 + 2 * (c_in - 1) * c_out)
    return m, a


def count_interpolation(output_points: int, dim: int) -> tuple[int, int]:
    if dim not in (1, 2):
        raise ConfigurationError(f"interpolation dim must be 1 or 2, got {dim}")
    scale = 1 if dim == 1 else 3
    return 2 * output_points * scale, 4 * output_points * scale


def count_plan_op(op: PlanOp) -> tuple[int, int]:
    if op.kind == "conv":
        return count_linear(op.in_ch * op.kernel, op.out_ch, op.points, op.bias)
    if op.kind == "spectral_mix":
        return count_einsum_spectral(op.modes, op.in_ch, op.out_ch)
    if op.kind in ("rfft", "irfft"):
        return count_fft(op.points, op.in_ch, real_valued=True)
    if op.kind in _ADDITION_KINDS:
        return 0, op.elements
    if op.kind in _MOVE_KINDS:
        return 0, 0
    raise ConfigurationError(f"no counting rule for op kind {op.kind!r}")


# -- whole-model pricing ------------------------------------------------------------

def model_cost(model, regime: QuantRegime | None = None, scale=None,
               rollout_steps: int | None = None, verify: bool = False) -> CostReport:
    """Price a full rollout of the model.

    ``scale`` is a rescale.ScaleSpec (or None for native resolution);
    ``rollout_steps`` defaults to one bundled pass. Quantized pricing applies
    the regime's bitwidths to every MAC layer except the first and last,
    which stay at 16 bits like all non-MAC ops.
    """
    inner = model.inner if hasattr(model, "inner") else model
    spec = inner.spec
    n_net = scale.network_size if scale is not None else spec.grid_size
    bundle = spec.output_steps
    steps = rollout_steps if rollout_steps is not None else bundle
    if steps % bundle:
        raise ConfigurationError(f"rollout steps {steps} not divisible by bundle {bundle}")
    passes = steps // bundle
    plan = inner.op_plan(n_net)
    mac_names = [l.name for l in inner.mac_layers()]
    mask = dict(zip(mac_names, quantizable_mask(len(mac_names))))
    lines: list[LayerCount] = []
    if scale is not None and not scale.identity:
        m, a = count_interpolation(spec.in_channels * n_net, dim=1)
        lines.append(LayerCount("downsample", "resize", m, a))
    for op in plan:
        m, a = count_plan_op(op)
        b_w = b_a = INT16
        if regime is not None and op.kind in _MAC_KINDS and mask.get(op.name, False):
            b_w, b_a = regime.b_w, regime.b_a
        lines.append(LayerCount(op.name, op.kind, m * passes, a * passes, b_w, b_a))
    if scale is not None and not scale.identity:
        m, a = count_interpolation(spec.out_fields * steps * scale.input_size, dim=1)
        lines.append(LayerCount("upsample", "resize", m, a))
    report = CostReport(lines=lines)
    if passes > 1:
        report.footnotes.append(f"network ops priced once per pass x {passes} passes")
    report.footnotes.append(
        "activations, norms, and residual adds priced as one 16-bit addition per element")
    report.footnotes.append(
        "data movement (mode truncation, bit reversal, nearest upsampling, concat) is free")
    if verify:
        _verify_against_forward(inner, plan, n_net)
    return report


def _verify_against_forward(inner, plan, n_net: int) -> None:
    """Execute one unbatched forward pass and compare instrumented multiply
    counts per MAC kind (plus FFT) against the static plan, exactly."""
    counter = engine.OpCounter()
    x = engine.tensor(np.zeros((inner.spec.in_channels, n_net), dtype=np.float32))
    with engine.no_grad(), engine.count_ops(counter):
        inner.forward(x)
    checked = {"conv": "conv", "spectral_mix": "spectral_mix", "rfft": "fft", "irfft": "fft"}
    planned: dict[str, int] = {}
    for op in plan:
        if op.kind in checked:
            kind = checked[op.kind]
            m, _ = count_plan_op(op)
            planned[kind] = planned.get(kind, 0) + m
    for kind in set(planned) | {k for k in counter.by_kind if k in set(checked.values())}:
        got = counter.kind_mults(kind)
        want = planned.get(kind, 0)
        if got != want:
            raise CostAccountingError(
                f"instrumented forward executed {got} {kind} multiplies, "
                f"the plan accounts for {want}")
    extra = [k for k in counter.by_kind
             if k in ("matmul",) or (k not in set(checked.values()) and k != "resize")]
    if extra:
        raise CostAccountingError(
            f"forward pass touched multiplication-bearing ops absent from the plan: {extra}")
