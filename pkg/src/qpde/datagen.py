"""Classical solvers and random-condition generators for training data.

Everything is generated on a fine grid (``fine_factor`` times the target
resolution) and restricted to the requested sizes, so discretization error
stays below model error. All generators and solvers are deterministic given
(seed, config).

Schemes:

* Burgers (periodic, T=2): conservative finite volumes, Rusanov flux on
  u^2/2 with central diffusion, explicit SSP-RK2, adaptive dt at CFL 0.4.
  The flux form telescopes, so the spatial mean is conserved to roundoff.
* Diffusion-sorption (T=500): diffusion implicit (tridiagonal solve per
  step), the retardation factor R(u) = 1 + 2.16 u^-0.126 lagged one step
  and evaluated with u floored at 1e-6 to dodge the singularity at zero.
  Left boundary holds u=1 through a ghost cell; the right boundary uses the
  flux-matched ghost g = D (u[-2] - u[-1]) / dx. The implicit matrix is an
  M-matrix, which keeps the solution inside (0, 1].
* Darcy (steady 2D): 5-point finite volumes with harmonic-mean face
  coefficients, conjugate gradients to relative residual 1e-8. The
  coefficient field is a thresholded Gaussian random field: spectral
  synthesis with (1+|k|^2)^-2 amplitudes, split at the median into
  values {12, 3}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from .dataio import Dataset
from .errors import CFLError, ConfigurationError, SolverError

PDES = ("burgers", "diffsorp", "darcy")
DARCY_COEF_VALUES = (12.0, 3.0)


@dataclass(frozen=True)
class SolverConfig:
    pde: str
    n_x: int = 128
    n_t: int = 41
    fine_factor: int = 4
    t_end: float | None = None
    nu: float = 0.001               # Burgers viscosity (effective nu/pi)
    diffusion: float = 5e-4         # diff-sorp D
    retardation_scale: float = 2.16
    retardation_exponent: float = -0.126
    forcing: float = 1.0            # Darcy f
    cfl: float = 0.4
    time_oversample: int = 8        # diff-sorp substeps per save interval
    fixed_dt: float | None = None   # Burgers: override adaptive stepping
    n_waves: int = 4                # Burgers IC superposition size
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None

    def __post_init__(self):
        if self.pde not in PDES:
            raise ConfigurationError(f"unknown pde {self.pde!r}")
        if self.n_x < 2 or self.fine_factor < 1:
            raise ConfigurationError("grid sizes must be positive")
        if self.pde != "darcy" and self.n_t < 2:
            raise ConfigurationError("time-dependent PDEs need n_t >= 2")

    @property
    def horizon(self) -> float:
        if self.t_end is not None:
            return self.t_end
        return {"burgers": 2.0, "diffsorp": 500.0, "darcy": 1.0}[self.pde]

    @property
    def boundary(self) -> str:
        return {"burgers": "periodic", "diffsorp": "dirichlet-robin",
                "darcy": "dirichlet-zero"}[self.pde]


@dataclass
class Trajectory:
    u: np.ndarray          # [n_t, n_fields, n_x(, n_y)]
    tau: float
    meta: dict[str, str] = field(default_factory=dict)


# -- Burgers -------------------------------------------------------------------

def gen_burgers_ic(seed: int, n_waves: int = 4, n_x: int = 512) -> np.ndarray:
    """Superposition of random sinusoids on the periodic grid x_i = i/N.

    Wavenumbers draw uniformly from 1..8, amplitudes from U(-0.5, 0.5),
    phases from U(0, 2pi); the same seed yields the same continuum function
    at every resolution.
    """
    if n_waves < 1:
        raise ConfigurationError("need at least one wave")
    rng = np.random.default_rng(seed)
    k = rng.integers(1, 9, size=n_waves)
    amp = rng.uniform(-0.5, 0.5, size=n_waves)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    x = np.arange(n_x) / n_x
    return np.sum(amp[:, None] * np.sin(2.0 * np.pi * k[:, None] * x[None, :]
                                        + phase[:, None]), axis=0)


def _burgers_rhs(u: np.ndarray, dx: float, nu_eff: float) -> np.ndarray:
    up = np.roll(u, -1)
    flux = 0.25 * (u * u + up * up) - 0.5 * np.maximum(np.abs(u), np.abs(up)) * (up - u)
    div = (flux - np.roll(flux, 1)) / dx
    lap = (np.roll(u, 1) - 2.0 * u + np.roll(u, -1)) / (dx * dx)
    return -div + nu_eff * lap


def solve_burgers(u0: np.ndarray, cfg: SolverConfig) -> Trajectory:
    """Advance the periodic Burgers equation and restrict to (n_t, n_x)."""
    u = np.array(u0, dtype=np.float64)
    n_fine = u.size
    if n_fine % cfg.n_x:
        raise ConfigurationError(f"fine grid {n_fine} not a multiple of target {cfg.n_x}")
    factor = n_fine // cfg.n_x
    dx = 1.0 / n_fine
    nu_eff = cfg.nu / np.pi
    saves = np.linspace(0.0, cfg.horizon, cfg.n_t)
    frames = [u[::factor].copy()]
    t = 0.0
    for t_target in saves[1:]:
        while t < t_target - 1e-12:
            umax = float(np.max(np.abs(u))) + 1e-12
            stable = cfg.cfl * min(dx / umax, dx * dx / (2.0 * nu_eff))
            if cfg.fixed_dt is not None:
                if cfg.fixed_dt > stable:
                    raise CFLError(
                        f"fixed dt {cfg.fixed_dt:g} exceeds the stable bound "
                        f"{stable:g} (dx={dx:g}, max|u|={umax:g})")
                stable = cfg.fixed_dt
            dt = min(stable, t_target - t)
            k1 = _burgers_rhs(u, dx, nu_eff)
            u1 = u + dt * k1
            u = 0.5 * (u + u1 + dt * _burgers_rhs(u1, dx, nu_eff))
            t += dt
        if not np.all(np.isfinite(u)):
            raise SolverError(f"Burgers solution lost finiteness at t={t:g}")
        frames.append(u[::factor].copy())
    tau = float(saves[1] - saves[0])
    return Trajectory(np.stack(frames)[:, None, :], tau,
                      {"pde": "burgers", "nu": str(cfg.nu), "scheme": "fv-rusanov-rk2",
                       "fine_factor": str(factor)})


# -- Diffusion-sorption ----------------------------------------------------------

def gen_diffsorp_ic(seed: int, n_x: int = 512) -> np.ndarray:
    """I.i.d. uniform values in (0, 0.2), one per cell."""
    rng = np.random.default_rng(seed)
    return np.maximum(rng.uniform(0.0, 0.2, size=n_x), 1e-9)


def _retardation(u: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    # u^-0.126 is singular at 0; the IC support keeps u positive, the floor
    # guards roundoff.
    return 1.0 + cfg.retardation_scale * np.maximum(u, 1e-6) ** cfg.retardation_exponent


def solve_diffsorp(u0: np.ndarray, cfg: SolverConfig) -> Trajectory:
    """Semi-implicit diffusion with lagged retardation on a cell-centered grid."""
    u = np.array(u0, dtype=np.float64)
    if np.min(u) <= 0.0 or np.max(u) > 1.0:
        raise SolverError("diff-sorp initial condition must lie in (0, 1]")
    n_fine = u.size
    if n_fine % cfg.n_x:
        raise ConfigurationError(f"fine grid {n_fine} not a multiple of target {cfg.n_x}")
    factor = n_fine // cfg.n_x
    dx = 1.0 / n_fine
    d_over_dx = cfg.diffusion / dx
    saves = np.linspace(0.0, cfg.horizon, cfg.n_t)
    dt = float(saves[1] - saves[0]) / cfg.time_oversample

    def restrict(v):
        return v.reshape(cfg.n_x, factor).mean(axis=1)

    frames = [restrict(u)]
    ab = np.zeros((3, n_fine))
    for _ in saves[1:]:
        for _ in range(cfg.time_oversample):
            c = dt * cfg.diffusion / (_retardation(u, cfg) * dx * dx)
            rhs = u.copy()
            # interior rows: (I - dt*c*L) with ghost-based boundary rows
            ab[0, 1:] = -c[:-1]          # super-diagonal entries a[i, i+1]
            ab[1, :] = 1.0 + 2.0 * c
            ab[2, :-1] = -c[1:]          # sub-diagonal entries a[i, i-1]
            # left Dirichlet through ghost 2*1 - u[0]
            ab[1, 0] = 1.0 + 3.0 * c[0]
            rhs[0] += 2.0 * c[0] * 1.0
            # right flux-matched ghost g = D*(u[-2]-u[-1])/dx
            ab[1, -1] = 1.0 + (2.0 + d_over_dx) * c[-1]
            ab[2, -2] = -(1.0 + d_over_dx) * c[-1]
            u = solve_banded((1, 1), ab, rhs)
            if np.min(u) < -1e-10:
                raise SolverError(f"diff-sorp solution went nonpositive (min {np.min(u):g})")
            u = np.maximum(u, 1e-12)
        frames.append(restrict(u))
    tau = float(saves[1] - saves[0])
    return Trajectory(np.stack(frames)[:, None, :], tau,
                      {"pde": "diffsorp", "diffusion": str(cfg.diffusion),
                       "scheme": "implicit-lagged-R", "fine_factor": str(factor)})


# -- Darcy ---------------------------------------------------------------------

def gen_darcy_coefficient(seed: int, grid: int) -> np.ndarray:
    """Two-valued coefficient field from a median-thresholded Gaussian field."""
    if grid < 32:
        raise ConfigurationError(f"darcy grid must be >= 32, got {grid}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(grid, grid))
    spec = np.fft.fft2(noise)
    k = np.fft.fftfreq(grid) * grid
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    spec *= (1.0 + k2) ** -2.0
    smooth = np.real(np.fft.ifft2(spec))
    hi, lo = DARCY_COEF_VALUES
    return np.where(smooth >= np.median(smooth), hi, lo)


def _darcy_matvec(v: np.ndarray, cw, ce, cs, cn, h2: float) -> np.ndarray:
    n = v.shape[0] + 2
    full = np.zeros((n, n))
    full[1:-1, 1:-1] = v
    west = full[1:-1, :-2]
    east = full[1:-1, 2:]
    south = full[:-2, 1:-1]
    north = full[2:, 1:-1]
    return (cw * (v - west) + ce * (v - east) + cs * (v - south) + cn * (v - north)) / h2


def solve_darcy(a: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Solve -div(a grad u) = f with zero Dirichlet walls; returns the full grid."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"coefficient must be a square 2-D field, got {a.shape}")
    if np.min(a) <= 0.0:
        raise SolverError("darcy coefficient must be strictly positive")
    n = a.shape[0]
    h = 1.0 / (n - 1)
    hm = lambda p, q: 2.0 * p * q / (p + q)
    inner = a[1:-1, 1:-1]
    cw = hm(inner, a[1:-1, :-2])
    ce = hm(inner, a[1:-1, 2:])
    cs = hm(inner, a[:-2, 1:-1])
    cn = hm(inner, a[2:, 1:-1])
    h2 = h * h
    b = np.full((n - 2, n - 2), cfg.forcing)
    x = np.zeros_like(b)
    r = b - _darcy_matvec(x, cw, ce, cs, cn, h2)
    p = r.copy()
    rs = float(np.sum(r * r))
    b_norm = float(np.sqrt(np.sum(b * b)))
    max_iter = cfg.cg_max_iter or 40 * n
    for _ in range(max_iter):
        if math.sqrt(rs) <= cfg.cg_tol * b_norm:
            break
        ap = _darcy_matvec(p, cw, ce, cs, cn, h2)
        alpha = rs / float(np.sum(p * ap))
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.sum(r * r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        raise SolverError(
            f"conjugate gradients did not reach {cfg.cg_tol:g} in {max_iter} iterations "
            f"(residual {math.sqrt(rs) / b_norm:g})")
    full = np.zeros((n, n))
    full[1:-1, 1:-1] = x
    return full


# -- dataset assembly ------------------------------------------------------------

def generate_trajectory(cfg: SolverConfig, seed: int) -> Trajectory:
    if cfg.pde == "burgers":
        u0 = gen_burgers_ic(seed, cfg.n_waves, cfg.n_x * cfg.fine_factor)
        return solve_burgers(u0, cfg)
    if cfg.pde == "diffsorp":
        u0 = gen_diffsorp_ic(seed, cfg.n_x * cfg.fine_factor)
        return solve_diffsorp(u0, cfg)
    a = gen_darcy_coefficient(seed, cfg.n_x)
    u = solve_darcy(a, cfg)
    traj = np.stack([a, u])[None]  # [1, 2, n, n]
    return Trajectory(traj, 1.0, {"pde": "darcy", "forcing": str(cfg.forcing)})


def generate_dataset(cfg: SolverConfig, n_trajectories: int, base_seed: int = 0) -> Dataset:
    """Solve ``n_trajectories`` independent problems; seeds are base_seed + i."""
    trajs = [generate_trajectory(cfg, base_seed + i) for i in range(n_trajectories)]
    u = np.stack([t.u for t in trajs]).astype(np.float32)
    meta = dict(trajs[0].meta)
    meta.update({"tau": str(trajs[0].tau), "base_seed": str(base_seed),
                 "n_x": str(cfg.n_x), "n_t": str(cfg.n_t), "domain": "(0,1)",
                 "fine_factor": str(cfg.fine_factor), "horizon": str(cfg.horizon),
                 "boundary": cfg.boundary})
    return Dataset(u=u, meta=meta)
