"""Experiment orchestration: the (regime x scale) grid, the results ledger,
Pareto-front extraction, and CSV/SVG artifacts.

A sweep trains one float model per scale, then fine-tunes one quantized
model per regime on top of it. Every completed cell appends a row to an
append-only ledger CSV keyed by a hash of the semantic config sections, so
reruns skip finished work; one failed cell is recorded and does not abort
the grid. Cells across scales may run in parallel processes (bounded by the
QPDE_THREADS environment variable); ledger appends take an advisory file
lock.

Plots are written as self-contained SVG (log-log, one polyline per regime
across scales, Pareto front highlighted). Zero or sub-floor MSE values are
clamped to 1e-12 before the log transform.
"""

from __future__ import annotations

import configparser
import fcntl
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cost, dataio, quant, train
from .dataio import Dataset, read_dataset
from .errors import ConfigurationError, QpdeError
from .models import ModelSpec, build_model
from .quant import QuantRegime
from .rescale import ScaleSpec, wrap_scaled_model
from .train import TrainConfig

MSE_LOG_FLOOR = 1e-12
DEFAULT_REGIMES = ("w4a4", "w4a8", "w8a8", "w8a16")
DEFAULT_SCALES = (0.7, 0.5, 0.3, 0.2)
# per-dataset scale presets for high-resolution source data
SCALE_PRESETS = {
    "diffsorp-highres": (0.01, 0.02, 0.05, 1.0),
    "burgers-highres": (0.02, 0.05, 0.1, 1.0),
    "darcy-highres": (0.05, 0.1, 0.2, 1.0),
}

CSV_COLUMNS = ("dataset", "architecture", "regime", "b_w", "b_a", "scale",
               "mse", "cost", "flops", "seed", "checkpoint")


@dataclass(frozen=True)
class ExperimentRecord:
    dataset: str
    architecture: str
    regime: str          # "float" or wXaY
    b_w: int
    b_a: int
    scale: float
    mse: float
    cost: int
    flops: int
    seed: int
    checkpoint: str

    def row(self) -> list[str]:
        return [self.dataset, self.architecture, self.regime, str(self.b_w),
                str(self.b_a), repr(self.scale), repr(self.mse), str(self.cost),
                str(self.flops), str(self.seed), self.checkpoint]

    @classmethod
    def from_row(cls, row: list[str]) -> "ExperimentRecord":
        return cls(row[0], row[1], row[2], int(row[3]), int(row[4]), float(row[5]),
                   float(row[6]), int(row[7]), int(row[8]), int(row[9]), row[10])


def write_records_csv(records, path) -> None:
    with open(path, "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            f.write(",".join(r.row()) + "\n")


def read_records_csv(path) -> list[ExperimentRecord]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ConfigurationError(f"{path} is not a results CSV")
    return [ExperimentRecord.from_row(ln.split(",")) for ln in lines[1:]]


def pareto_front(records) -> list[ExperimentRecord]:
    """All records not strictly dominated in (cost, mse); ties all kept.

    Order-invariant: output preserves input order of the surviving records.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("pareto_front needs at least one record")
    c = np.array([r.cost for r in records], dtype=np.float64)
    m = np.array([r.mse for r in records], dtype=np.float64)
    le_c = c[:, None] <= c[None, :]
    le_m = m[:, None] <= m[None, :]
    strict = (c[:, None] < c[None, :]) | (m[:, None] < m[None, :])
    dominated = np.any(le_c & le_m & strict, axis=0)
    return [r for r, d in zip(records, dominated) if not d]


# -- run configuration -------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    name: str
    dataset_train: str
    dataset_test: str
    out_dir: str
    seed: int = 0
    architecture: str = "fno1d"
    width: int = 32
    modes: int = 16
    layers: int = 4
    hidden_channels: int = 8
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    regimes: tuple[str, ...] = DEFAULT_REGIMES
    scales: tuple[float, ...] = DEFAULT_SCALES

    def parsed_regimes(self) -> list[QuantRegime]:
        return [QuantRegime.parse(r) for r in self.regimes]

    def model_spec(self, ds: Dataset) -> ModelSpec:
        return ModelSpec(architecture=self.architecture, grid_size=ds.n_x,
                         in_fields=ds.n_fields, out_fields=ds.n_fields,
                         input_steps=self.train_cfg.input_steps,
                         output_steps=self.train_cfg.output_steps,
                         layers=self.layers, width=self.width, modes=self.modes,
                         hidden_channels=self.hidden_channels)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"name": self.name, "dataset_train": self.dataset_train,
                     "dataset_test": self.dataset_test, "out": self.out_dir,
                     "seed": str(self.seed)}
        cp["model"] = {"architecture": self.architecture, "width": str(self.width),
                       "modes": str(self.modes), "layers": str(self.layers),
                       "hidden_channels": str(self.hidden_channels)}
        tc = asdict(self.train_cfg)
        cp["train"] = {k: ("" if v is None else str(v)) for k, v in tc.items()}
        cp["sweep"] = {"regimes": ", ".join(self.regimes),
                       "scales": ", ".join(repr(s) for s in self.scales)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
        run = cp["run"]
        model = cp["model"] if cp.has_section("model") else {}
        tc_kwargs = {}
        if cp.has_section("train"):
            fields = TrainConfig.__dataclass_fields__
            for k, v in cp["train"].items():
                if k not in fields:
                    raise ConfigurationError(f"unknown train option {k!r}")
                if v == "":
                    tc_kwargs[k] = None
                    continue
                ftype = fields[k].type
                if ftype == "int":
                    tc_kwargs[k] = int(v)
                elif ftype == "float":
                    tc_kwargs[k] = float(v)
                elif ftype == "bool":
                    tc_kwargs[k] = v.lower() in ("1", "true", "yes")
                elif ftype in ("int | None", "float | None"):
                    tc_kwargs[k] = (int(v) if ftype.startswith("int") else float(v))
                else:
                    tc_kwargs[k] = v
        sweep = cp["sweep"] if cp.has_section("sweep") else {}
        regimes = tuple(s.strip() for s in sweep.get("regimes", ", ".join(DEFAULT_REGIMES)).split(","))
        scales = tuple(float(s) for s in sweep.get("scales", ", ".join(map(str, DEFAULT_SCALES))).split(","))
        return cls(name=run.get("name", "run"),
                   dataset_train=run["dataset_train"], dataset_test=run["dataset_test"],
                   out_dir=run.get("out", "runs/out"), seed=int(run.get("seed", "0")),
                   architecture=model.get("architecture", "fno1d"),
                   width=int(model.get("width", "32")), modes=int(model.get("modes", "16")),
                   layers=int(model.get("layers", "4")),
                   hidden_channels=int(model.get("hidden_channels", "8")),
                   train_cfg=TrainConfig(**tc_kwargs), regimes=regimes, scales=scales)

    def config_hash(self) -> str:
        cp = configparser.ConfigParser()
        cp.read_string(self.to_ini())
        cp.remove_option("run", "out")  # output location is not semantic
        buf = io.StringIO()
        cp.write(buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]


# -- ledger --------------------------------------------------------------------------

_LEDGER_COLUMNS = ("config_hash", "cell", "status") + CSV_COLUMNS


def _ledger_path(out_dir) -> Path:
    return Path(out_dir) / "ledger.csv"


def append_ledger(out_dir, config_hash: str, cell: str, status: str,
                  record: ExperimentRecord | None) -> None:
    path = _ledger_path(out_dir)
    row = [config_hash, cell, status] + (record.row() if record else [""] * len(CSV_COLUMNS))
    with open(path, "a") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        if f.tell() == 0:
            f.write(",".join(_LEDGER_COLUMNS) + "\n")
        f.write(",".join(row) + "\n")
        fcntl.flock(f, fcntl.LOCK_UN)


def load_ledger(out_dir, config_hash: str) -> dict[str, ExperimentRecord]:
    path = _ledger_path(out_dir)
    done: dict[str, ExperimentRecord] = {}
    if not path.exists():
        return done
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    for ln in lines[1:]:
        parts = ln.split(",")
        if parts[0] == config_hash and parts[2] == "ok":
            done[parts[1]] = ExperimentRecord.from_row(parts[3:])
    return done


# -- sweep ---------------------------------------------------------------------------

def _cell_id(scale: float, regime: str) -> str:
    return f"scale{scale:g}|{regime}"


def _float_ckpt_path(out_dir, scale: float) -> Path:
    return Path(out_dir) / f"float_scale{scale:g}.qpck"


def _run_scale(cfg: RunConfig, scale: float, done: dict[str, ExperimentRecord]):
    """Train the float baseline for one scale, then fine-tune each regime."""
    ds_train = read_dataset(cfg.dataset_train)
    ds_test = read_dataset(cfg.dataset_test)
    periodic = ds_train.meta.get("boundary") == "periodic"
    spec = cfg.model_spec(ds_train)
    tc = replace(cfg.train_cfg, seed=cfg.seed)
    chash = cfg.config_hash()
    scale_spec = ScaleSpec.for_model(scale, ds_train.n_x, cfg.architecture,
                                     periodic=periodic)
    results: list[ExperimentRecord] = []
    failures: list[tuple[str, str]] = []

    def finish(cell, record):
        append_ledger(cfg.out_dir, chash, cell, "ok", record)
        results.append(record)

    float_cell = _cell_id(scale, "float")
    float_path = _float_ckpt_path(cfg.out_dir, scale)
    try:
        if float_cell in done:
            results.append(done[float_cell])
            if not float_path.exists():
                raise ConfigurationError(
                    f"ledger marks {float_cell} done but {float_path} is missing")
        else:
            model = wrap_scaled_model(build_model(spec, cfg.seed), scale_spec)
            hist = train.train(model, ds_train, ds_test, tc)
            mse = evaluate_exact(model, ds_test, tc)
            rep = cost.model_cost(model, None, scale=scale_spec,
                                  rollout_steps=tc.test_steps)
            train.save_checkpoint(float_path, model, tc, hist)
            finish(float_cell, ExperimentRecord(
                cfg.name, cfg.architecture, "float", 16, 16, scale, mse,
                rep.total_cost, rep.flops, cfg.seed, str(float_path)))
    except QpdeError as e:
        append_ledger(cfg.out_dir, chash, float_cell, f"failed: {e}", None)
        failures.append((float_cell, str(e)))
        return results, failures   # regimes need the float model

    for regime in cfg.parsed_regimes():
        cell = _cell_id(scale, regime.label)
        if cell in done:
            results.append(done[cell])
            continue
        try:
            model, _ = train.load_checkpoint(float_path)
            hist = train.qat_finetune(model, regime, ds_train, ds_test, tc)
            mse = evaluate_exact(model, ds_test, tc)
            rep = cost.model_cost(model, regime, scale=scale_spec,
                                  rollout_steps=tc.test_steps)
            qpath = Path(cfg.out_dir) / f"{regime.label}_scale{scale:g}.qpck"
            train.save_checkpoint(qpath, model, tc, hist)
            finish(cell, ExperimentRecord(
                cfg.name, cfg.architecture, regime.label, regime.b_w, regime.b_a,
                scale, mse, rep.total_cost, rep.flops, cfg.seed, str(qpath)))
        except QpdeError as e:
            append_ledger(cfg.out_dir, chash, cell, f"failed: {e}", None)
            failures.append((cell, str(e)))
    return results, failures


def evaluate_exact(model, ds: Dataset, tc: TrainConfig) -> float:
    return train.evaluate(model, ds, tc)


def _scale_worker(ini_text: str, scale: float):
    cfg = _config_from_text(ini_text)
    done = load_ledger(cfg.out_dir, cfg.config_hash())
    return _run_scale(cfg, scale, done)


def _config_from_text(text: str) -> RunConfig:
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as f:
        f.write(text)
        path = f.name
    try:
        return RunConfig.from_ini(path)
    finally:
        os.unlink(path)


def run_experiment(cfg: RunConfig) -> tuple[list[ExperimentRecord], list[tuple[str, str]]]:
    """Execute the sweep grid; returns (records, failures). Idempotent per
    (config hash, cell): completed cells are skipped on rerun."""
    if not Path(cfg.dataset_train).exists():
        raise ConfigurationError(f"training dataset {cfg.dataset_train} does not exist")
    if not Path(cfg.dataset_test).exists():
        raise ConfigurationError(f"test dataset {cfg.dataset_test} does not exist")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    done = load_ledger(cfg.out_dir, cfg.config_hash())
    workers = int(os.environ.get("QPDE_THREADS", "1"))
    records: list[ExperimentRecord] = []
    failures: list[tuple[str, str]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_scale_worker, cfg.to_ini(), s) for s in cfg.scales]
            for fut in futs:
                r, f = fut.result()
                records += r
                failures += f
    else:
        for s in cfg.scales:
            r, f = _run_scale(cfg, s, done)
            records += r
            failures += f
    return records, failures


# -- artifacts -------------------------------------------------------------------------

_PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb")


def _log_ticks(lo: float, hi: float) -> list[float]:
    first = math.floor(math.log10(lo))
    last = math.ceil(math.log10(hi))
    return [10.0 ** e for e in range(first, last + 1)]


def plot_svg(path, records: list[ExperimentRecord], front: list[ExperimentRecord],
             title: str) -> None:
    """Log-log cost-vs-MSE scatter: one polyline per regime, front dashed."""
    if not records:
        raise ConfigurationError("nothing to plot")
    w, h = 760, 540
    ml, mr, mt, mb = 80, 220, 50, 60
    xs = [max(r.cost, 1) for r in records]
    ys = [max(r.mse, MSE_LOG_FLOOR) for r in records]
    lx0, lx1 = math.log10(min(xs) * 0.8), math.log10(max(xs) * 1.25)
    ly0, ly1 = math.log10(min(ys) * 0.8), math.log10(max(ys) * 1.25)

    def px(c):
        return ml + (math.log10(max(c, 1)) - lx0) / max(lx1 - lx0, 1e-9) * (w - ml - mr)

    def py(m):
        v = math.log10(max(m, MSE_LOG_FLOOR))
        return h - mb - (v - ly0) / max(ly1 - ly0, 1e-9) * (h - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w // 2}" y="24" text-anchor="middle" font-size="16">{title}</text>']
    # axes
    parts.append(f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black"/>')
    for t in _log_ticks(min(xs), max(xs)):
        if lx0 <= math.log10(t) <= lx1:
            parts.append(f'<line x1="{px(t):.1f}" y1="{h - mb}" x2="{px(t):.1f}" '
                         f'y2="{h - mb + 5}" stroke="black"/>')
            parts.append(f'<text x="{px(t):.1f}" y="{h - mb + 20}" text-anchor="middle" '
                         f'font-size="11">1e{int(math.log10(t))}</text>')
    for t in _log_ticks(min(ys), max(ys)):
        if ly0 <= math.log10(t) <= ly1:
            parts.append(f'<line x1="{ml - 5}" y1="{py(t):.1f}" x2="{ml}" '
                         f'y2="{py(t):.1f}" stroke="black"/>')
            parts.append(f'<text x="{ml - 8}" y="{py(t):.1f}" text-anchor="end" '
                         f'font-size="11">1e{int(math.log10(t))}</text>')
    parts.append(f'<text x="{(w - mr + ml) // 2}" y="{h - 16}" text-anchor="middle" '
                 f'font-size="13">inference cost (bit-weighted ops)</text>')
    parts.append(f'<text x="22" y="{h // 2}" text-anchor="middle" font-size="13" '
                 f'transform="rotate(-90 22 {h // 2})">validation MSE</text>')
    regimes = []
    for r in records:
        if r.regime not in regimes:
            regimes.append(r.regime)
    for i, reg in enumerate(regimes):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted([r for r in records if r.regime == reg], key=lambda r: r.cost)
        coords = " ".join(f"{px(r.cost):.1f},{py(r.mse):.1f}" for r in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for r in pts:
            parts.append(f'<circle cx="{px(r.cost):.1f}" cy="{py(r.mse):.1f}" r="4" '
                         f'fill="{color}"/>')
        ly = mt + 18 * i
        parts.append(f'<rect x="{w - mr + 14}" y="{ly - 9}" width="12" height="12" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{w - mr + 32}" y="{ly + 2}" font-size="12">{reg}</text>')
    fr = sorted(front, key=lambda r: r.cost)
    coords = " ".join(f"{px(r.cost):.1f},{py(r.mse):.1f}" for r in fr)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="black" '
                 f'stroke-width="1.2" stroke-dasharray="5,4"/>')
    for r in fr:
        parts.append(f'<circle cx="{px(r.cost):.1f}" cy="{py(r.mse):.1f}" r="7" '
                     f'fill="none" stroke="black" stroke-width="1.4"/>')
    ly = mt + 18 * len(regimes)
    parts.append(f'<text x="{w - mr + 14}" y="{ly + 2}" font-size="12">o = Pareto front</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def emit_outputs(records: list[ExperimentRecord], out_dir) -> list[Path]:
    """Write results.csv and one cost-vs-MSE plot per dataset."""
    if not records:
        raise ConfigurationError("no records to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "results.csv"]
    write_records_csv(records, paths[0])
    for name in sorted({r.dataset for r in records}):
        subset = [r for r in records if r.dataset == name]
        front = pareto_front(subset)
        p = out / f"plot_{name}.svg"
        plot_svg(p, subset, front, f"{name}: cost vs error")
        paths.append(p)
    return paths
