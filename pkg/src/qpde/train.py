"""Training protocol for the surrogates.

A training step samples a random window per trajectory: ``input_steps``
consecutive states feed the network, the following ``train_steps`` states
are targets. Epochs repeat ceil((N_t - input_steps) / train_steps) times so
the full trajectory length is covered in expectation. Rollouts recur in
bundles of ``output_steps`` predictions; with pushforward enabled, only the
final ``pushforward_steps`` targets carry gradient - earlier bundles still
feed the recurrence but are detached from the graph. The logged loss always
covers every target step so histories stay comparable across pushforward
settings.

Optimization is Adam with decoupled weight decay under a cosine-annealed
learning rate with linear warmup over the first 5% of steps. QAT fine-tuning
calibrates ranges on the first 20% of training trajectories, attaches
quantizers (scales learnable), and retrains with the QAT learning rate, no
weight decay, and global-norm gradient clipping.

Checkpoints store the model spec, parameters by name, quantizer state,
optimizer state, RNG state, and history in the QPCK container; identical
(config, seed) runs write bit-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import dataio, engine, quant
from .dataio import Dataset
from .engine import Tensor
from .errors import ConfigurationError, DimensionError, TrainingDivergenceError, UsageError
from .models import Model, ModelSpec, build_model
from .quant import QuantRegime
from .rescale import ScaledModel, ScaleSpec, wrap_scaled_model


@dataclass(frozen=True)
class WindowPlan:
    input_indices: tuple[int, ...]
    target_indices: tuple[int, ...]

    def __post_init__(self):
        seq = self.input_indices + self.target_indices
        if len(self.input_indices) < 1:
            raise ConfigurationError("window needs at least one input index")
        if any(b - a != 1 for a, b in zip(seq, seq[1:])):
            raise ConfigurationError("window indices must be contiguous and increasing")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    qat_epochs: int = 50
    batch_size: int = 50
    learning_rate: float = 1e-3
    qat_learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    input_steps: int = 5
    output_steps: int = 5
    train_steps: int = 20
    test_steps: int = 20
    pushforward_steps: int | None = None   # None: final bundle when rolling out
    warmup_frac: float = 0.05
    seed: int = 0
    loss: str = "mse"                      # mse | darcy
    qat_grad_clip: float | None = 1.0
    learnable_ranges: bool = True
    calibration_fraction: float = 0.2
    stop_at_val: float | None = None       # optional early-exit threshold

    def __post_init__(self):
        if self.train_steps % self.output_steps:
            raise ConfigurationError(
                f"train_steps {self.train_steps} must be a multiple of the "
                f"bundle size {self.output_steps}")
        if self.pushforward_steps is not None:
            if not 0 < self.pushforward_steps <= self.train_steps:
                raise ConfigurationError("pushforward_steps must lie in (0, train_steps]")
            if self.pushforward_steps % self.output_steps:
                raise ConfigurationError("pushforward_steps must be a multiple of the bundle")
        if self.loss not in ("mse", "darcy"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")

    def resolved_pushforward(self) -> int:
        if self.pushforward_steps is not None:
            return self.pushforward_steps
        # default: gradients through the final bundle only when rolling out
        return self.output_steps if self.train_steps > self.output_steps else self.train_steps


PRESETS: dict[str, TrainConfig] = {
    "burgers": TrainConfig(epochs=200, qat_epochs=50, batch_size=50,
                           learning_rate=1e-3, qat_learning_rate=1e-4,
                           weight_decay=1e-6, input_steps=5, output_steps=5,
                           train_steps=20, test_steps=20),
    "diffsorp": TrainConfig(epochs=200, qat_epochs=100, batch_size=50,
                            learning_rate=1e-3, qat_learning_rate=1e-4,
                            weight_decay=1e-6, input_steps=5, output_steps=5,
                            train_steps=10, test_steps=10),
    "darcy": TrainConfig(epochs=400, qat_epochs=100, batch_size=4,
                         learning_rate=5e-4, qat_learning_rate=1e-4,
                         weight_decay=1e-6, input_steps=1, output_steps=1,
                         train_steps=1, test_steps=1, loss="darcy"),
}


def sample_window(n_t: int, cfg: TrainConfig, rng: np.random.Generator) -> WindowPlan:
    """Uniform random start; inputs then train_steps targets, contiguous."""
    span = cfg.input_steps + cfg.train_steps
    if n_t < span:
        raise ConfigurationError(f"trajectory has {n_t} steps, window needs {span}")
    start = int(rng.integers(0, n_t - span + 1))
    return WindowPlan(tuple(range(start, start + cfg.input_steps)),
                      tuple(range(start + cfg.input_steps, start + span)))


def epoch_plan(n_t: int, input_steps: int, target_steps: int) -> int:
    """Repetitions per epoch: ceil((N_t - input_steps) / target_steps)."""
    if input_steps < 1 or target_steps < 1 or n_t <= input_steps:
        raise ConfigurationError("epoch plan needs n_t > input_steps and positive windows")
    return -(-(n_t - input_steps) // target_steps)


# -- losses ---------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, pred.data.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = engine.sub(pred, target)
    return engine.mean(engine.mul(diff, diff))


def darcy_loss(pred: Tensor, target, eps: float = 1e-8) -> Tensor:
    """Relative norm: sqrt(mean(err^2 / (target^2 + eps)))."""
    t = np.asarray(target if not isinstance(target, Tensor) else target.data,
                   dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {t.shape}")
    weight = (1.0 / (t * t + eps)).astype(pred.data.dtype)
    diff = engine.sub(pred, Tensor(t.astype(pred.data.dtype)))
    return engine.power(engine.mean(engine.mul(engine.mul(diff, diff), weight)), 0.5)


def _np_loss(pred: np.ndarray, target: np.ndarray, kind: str, eps: float = 1e-8) -> float:
    err = pred.astype(np.float64) - target.astype(np.float64)
    if kind == "darcy":
        t = target.astype(np.float64)
        return float(np.sqrt(np.mean(err * err / (t * t + eps))))
    return float(np.mean(err * err))


# -- rollout ----------------------------------------------------------------------

def rollout(model, window, steps: int, bundle: int, detach_steps: int = 0) -> Tensor:
    """Recurrent bundled prediction.

    window: [batch, input_steps, fields, n] initial states. Returns
    [batch, steps, fields, n] predictions at data resolution. Scaled models
    downsample once before the first pass and upsample once after the last;
    intermediate states stay at network resolution. Passes whose target
    steps all fall inside the first ``detach_steps`` run detached and feed
    the recurrence without gradient (pushforward).
    """
    if steps % bundle:
        raise ConfigurationError(f"steps {steps} not divisible by bundle {bundle}")
    window = window if isinstance(window, Tensor) else Tensor(np.asarray(window))
    if window.ndim != 4:
        raise DimensionError(f"window must be [batch, steps, fields, n], got {window.shape}")
    b_sz, s_in, fields, _ = window.shape
    scaled = isinstance(model, ScaledModel)
    inner = model.inner if scaled else model
    state = model.downsample(window) if scaled else window
    n_net = state.shape[-1]
    preds = []
    passes = steps // bundle
    for j in range(passes):
        detached = (j + 1) * bundle <= detach_steps
        x = engine.reshape(state, (b_sz, s_in * fields, n_net))
        if detached:
            with engine.no_grad():
                out = inner.forward(x)
        else:
            out = inner.forward(x)
        out = engine.reshape(out, (b_sz, bundle, fields, n_net))
        preds.append(out)
        if j + 1 < passes:
            if bundle < s_in:
                state = engine.concat([engine.narrow(state, 1, bundle, s_in - bundle), out],
                                      axis=1)
            elif bundle == s_in:
                state = out
            else:
                state = engine.narrow(out, 1, bundle - s_in, s_in)
    y = engine.concat(preds, axis=1) if len(preds) > 1 else preds[0]
    return model.upsample(y) if scaled else y


def persistence_baseline(ds: Dataset, cfg: TrainConfig) -> float:
    """MSE of repeating the last input state across the test horizon."""
    s, t = cfg.input_steps, cfg.test_steps
    last = ds.u[:, s - 1: s]
    target = ds.u[:, s: s + t]
    pred = np.broadcast_to(last, target.shape)
    return _np_loss(pred, target, "mse")


def evaluate(model, ds: Dataset, cfg: TrainConfig, batch_size: int | None = None) -> float:
    """Deterministic validation: test_steps-long rollouts from each trajectory start."""
    s, t = cfg.input_steps, cfg.test_steps
    if ds.n_time < s + t:
        raise ConfigurationError(f"dataset has {ds.n_time} steps, need {s + t}")
    bs = batch_size or cfg.batch_size
    total_sq = 0.0
    count = 0
    with engine.no_grad():
        for lo in range(0, ds.n_trajectories, bs):
            window = ds.u[lo:lo + bs, :s]
            target = ds.u[lo:lo + bs, s:s + t].astype(np.float64)
            pred = rollout(model, window, t, cfg.output_steps).data.astype(np.float64)
            total_sq += float(np.sum((pred - target) ** 2))
            count += target.size
    return total_sq / count


# -- optimizer and schedule --------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay; per-parameter LR factors supported."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 lr_factors: dict[int, float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_factors = lr_factors or {}
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        base = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            eta = base * self.lr_factors.get(id(p), 1.0)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay:
                p.data = p.data - eta * self.weight_decay * p.data
            p.data = p.data - eta * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.asarray(float(self.t))}
        for i in range(len(self.params)):
            out[f"opt/m/{i}"] = self.m[i]
            out[f"opt/v/{i}"] = self.v[i]
        return out


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float,
                     warmup_frac: float) -> float:
    """Linear warmup over the first warmup_frac of steps, then cosine to ~0."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- training loops -----------------------------------------------------------------

def _check_data(model, ds: Dataset, cfg: TrainConfig) -> None:
    spec = model.spec
    if ds.u.ndim != 4:
        raise DimensionError(f"expected 1-D dataset [n, t, f, x], got shape {ds.u.shape}")
    if ds.n_fields != spec.in_fields:
        raise ConfigurationError(f"dataset has {ds.n_fields} fields, model expects "
                                 f"{spec.in_fields}")
    if spec.input_steps != cfg.input_steps or spec.output_steps != cfg.output_steps:
        raise ConfigurationError("model spec and train config disagree on window sizes")


def train(model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          qat: bool = False) -> dict:
    """Optimize the model; returns history and leaves best-validation weights
    in place. Deterministic given (config, seed)."""
    _check_data(model, train_ds, cfg)
    n_t = train_ds.n_time
    steps, bundle = cfg.train_steps, cfg.output_steps
    detach_steps = steps - cfg.resolved_pushforward()
    params = [t for _, t in model.parameters()]
    lr_factors = {}
    if qat:
        qts = quant.quantizer_tensors(model)
        params = params + [t for t, _ in qts]
        lr_factors = {id(t): f for t, f in qts}
    opt = Adam(params, lr=cfg.qat_learning_rate if qat else cfg.learning_rate,
               weight_decay=0.0 if qat else cfg.weight_decay, lr_factors=lr_factors)
    epochs = cfg.qat_epochs if qat else cfg.epochs
    reps = epoch_plan(n_t, cfg.input_steps, steps)
    n = train_ds.n_trajectories
    batches_per_rep = -(-n // cfg.batch_size)
    total_steps = epochs * reps * batches_per_rep
    rng = np.random.default_rng([cfg.seed, 1 if qat else 0])
    u = train_ds.u
    loss_kind = cfg.loss
    history = {"train": [], "val": [], "lr": []}
    best_val = math.inf
    best_state: list[np.ndarray] | None = None
    step_i = 0
    span = cfg.input_steps + steps
    for epoch in range(epochs):
        ep_losses = []
        for _ in range(reps):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo: lo + cfg.batch_size]
                starts = rng.integers(0, n_t - span + 1, size=len(idx))
                xb = np.stack([u[i, s: s + cfg.input_steps] for i, s in zip(idx, starts)])
                yb = np.stack([u[i, s + cfg.input_steps: s + span] for i, s in zip(idx, starts)])
                preds = rollout(model, xb, steps, bundle, detach_steps)
                tail = engine.narrow(preds, 1, detach_steps, steps - detach_steps)
                loss_fn = darcy_loss if loss_kind == "darcy" else mse_loss
                loss = loss_fn(tail, yb[:, detach_steps:])
                engine.backward(loss)
                if qat and cfg.qat_grad_clip:
                    clip_grad_norm(params, cfg.qat_grad_clip)
                lr_t = cosine_warmup_lr(step_i, total_steps, opt.lr, cfg.warmup_frac)
                opt.step(lr_t)
                opt.zero_grad()
                if qat:
                    for layer in model.mac_layers():
                        if getattr(layer, "quant", None) is not None:
                            layer.quant.weight_q.clamp_scale()
                            layer.quant.input_q.clamp_scale()
                full = _np_loss(preds.data, yb, loss_kind)
                if not math.isfinite(full):
                    raise TrainingDivergenceError(
                        f"non-finite loss at epoch {epoch}, step {step_i}")
                ep_losses.append(full)
                step_i += 1
        val = evaluate(model, val_ds, cfg)
        history["train"].append(float(np.mean(ep_losses)))
        history["val"].append(val)
        history["lr"].append(cosine_warmup_lr(max(step_i - 1, 0), total_steps, opt.lr,
                                              cfg.warmup_frac))
        if val < best_val:
            best_val = val
            best_state = [p.data.copy() for p in params]
        if cfg.stop_at_val is not None and val <= cfg.stop_at_val:
            break
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data = saved
    history["best_val"] = best_val
    history["optimizer"] = opt
    history["rng_state"] = rng.bit_generator.state
    return history


def calibration_batches(model, ds: Dataset, cfg: TrainConfig):
    """Deterministic calibration inputs: the first window of the first 20%
    (calibration_fraction) of training trajectories, in batch_size groups."""
    n_cal = max(1, math.ceil(cfg.calibration_fraction * ds.n_trajectories))
    scaled = isinstance(model, ScaledModel)
    batches = []
    for lo in range(0, n_cal, cfg.batch_size):
        window = ds.u[lo: min(lo + cfg.batch_size, n_cal), : cfg.input_steps]
        x = Tensor(window)
        if scaled:
            x = model.downsample(x)
        b, s, f, n = x.shape
        batches.append(engine.reshape(x, (b, s * f, n)))
    return batches


def qat_finetune(model, regime: QuantRegime, train_ds: Dataset, val_ds: Dataset,
                 cfg: TrainConfig) -> dict:
    """Calibrate ranges on the calibration subset, attach quantizers, fine-tune."""
    inner = model.inner if isinstance(model, ScaledModel) else model
    batches = calibration_batches(model, train_ds, cfg)
    calibration = quant.calibrate_model(inner, batches, regime)
    quant.attach_quantizers(inner, regime, calibration, learnable=cfg.learnable_ranges)
    return train(model, train_ds, val_ds, cfg, qat=True)


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path, model, cfg: TrainConfig | None = None, history: dict | None = None,
                    extra_meta: dict[str, str] | None = None) -> None:
    inner = model.inner if isinstance(model, ScaledModel) else model
    arrays: dict[str, np.ndarray] = {}
    for name, t in inner.parameters():
        arrays[f"param/{name}"] = t.data
    quant_state = {}
    for layer in inner.mac_layers():
        q = getattr(layer, "quant", None)
        if q is None:
            continue
        arrays[f"quant/{layer.name}/weight_s"] = q.weight_q.s.data
        arrays[f"quant/{layer.name}/input_s"] = q.input_q.s.data
        arrays[f"quant/{layer.name}/input_z"] = q.input_q.z.data
        quant_state[layer.name] = {"enabled": q.enabled,
                                   "learnable": q.weight_q.learnable}
    history = dict(history or {})
    opt = history.pop("optimizer", None)
    rng_state = history.pop("rng_state", None)
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"spec": json.dumps(asdict(inner.spec), sort_keys=True),
            "regime": inner.regime.label if inner.regime else "float",
            "quant_state": json.dumps(quant_state, sort_keys=True),
            "history": json.dumps({k: v for k, v in history.items()
                                   if isinstance(v, (list, float, int))}, sort_keys=True),
            "rng_state": json.dumps(rng_state, sort_keys=True, default=str),
            "train_config": json.dumps(asdict(cfg), sort_keys=True) if cfg else "{}"}
    if isinstance(model, ScaledModel):
        meta["scale"] = json.dumps({"factor": model.scale.factor,
                                    "input_size": model.scale.input_size,
                                    "network_size": model.scale.network_size,
                                    "periodic": model.scale.periodic}, sort_keys=True)
    meta.update(extra_meta or {})
    dataio.write_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Rebuild the model (with quantizers and scaling wrapper) from a checkpoint."""
    arrays, meta = dataio.read_arrays(path)
    spec = ModelSpec(**json.loads(meta["spec"]))
    model = build_model(spec, rng_seed=0)
    model.load_param_arrays({name[len("param/"):]: a for name, a in arrays.items()
                             if name.startswith("param/")})
    quant_state = json.loads(meta.get("quant_state", "{}"))
    if meta.get("regime", "float") != "float" and quant_state:
        regime = QuantRegime.parse(meta["regime"])
        learnable = any(v.get("learnable") for v in quant_state.values())
        quant.attach_quantizers(model, regime, calibration=None, learnable=learnable)
        for layer in model.mac_layers():
            q = getattr(layer, "quant", None)
            if q is None:
                continue
            q.weight_q.s.data = arrays[f"quant/{layer.name}/weight_s"].copy()
            q.input_q.s.data = arrays[f"quant/{layer.name}/input_s"].copy()
            q.input_q.z.data = arrays[f"quant/{layer.name}/input_z"].copy()
            q.enabled = bool(quant_state.get(layer.name, {}).get("enabled", True))
    out = model
    if "scale" in meta:
        sc = json.loads(meta["scale"])
        out = wrap_scaled_model(model, ScaleSpec(sc["factor"], sc["input_size"],
                                                 sc["network_size"], sc["periodic"]))
    info = {"meta": meta, "history": json.loads(meta.get("history", "{}")),
            "train_config": json.loads(meta.get("train_config", "{}"))}
    return out, info
