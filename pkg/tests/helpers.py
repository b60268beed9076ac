"""Shared test oracles: central finite differences and a naive DFT."""

import numpy as np

from qpde import engine


def fd_gradcheck(build, inputs, n_probes=100, h=1e-6, rtol=1e-4, seed=0):
    """Check analytic gradients of a scalar-valued graph against central differences.

    build: callable taking a list of Tensors, returning a scalar Tensor.
    inputs: list of float64 arrays; every entry is treated as differentiable.
    Probes n_probes random coordinates across all inputs.
    """
    rng = np.random.default_rng(seed)
    ts = [engine.tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    loss = build(ts)
    engine.backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    sizes = np.array([a.size for a in inputs])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(n_probes, total), replace=False)
    worst = 0.0
    for c in coords:
        i = int(np.searchsorted(np.cumsum(sizes), c, side="right"))
        j = int(c - np.concatenate([[0], np.cumsum(sizes)])[i])
        fp = _eval_perturbed(build, inputs, i, j, +h)
        fm = _eval_perturbed(build, inputs, i, j, -h)
        fd = (fp - fm) / (2.0 * h)
        an = float(grads[i].reshape(-1)[j])
        err = abs(an - fd)
        tol = rtol * max(abs(an), abs(fd)) + 1e-8
        assert err <= tol, (
            f"gradient mismatch at input {i} coord {j}: analytic {an}, fd {fd}, err {err}")
        worst = max(worst, err / (max(abs(an), abs(fd)) + 1e-12))
    return worst


def _eval_perturbed(build, inputs, i, j, delta):
    arrs = [np.array(a, dtype=np.float64) for a in inputs]
    arrs[i].reshape(-1)[j] += delta
    with engine.no_grad():
        loss = build([engine.tensor(a) for a in arrs])
    return float(loss.data)


def naive_dft(x):
    """O(N^2) DFT oracle, X_k = sum_n x_n exp(-2i pi k n / N)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ w.T
