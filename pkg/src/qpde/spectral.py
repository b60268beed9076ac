"""Power-of-two real FFTs and complex spectral ops.

The transform is an iterative radix-2 decimation-in-time FFT vectorized over
leading axes. Lengths are restricted to powers of two so the cost model's
N*ceil(log2 N) pricing is exact; anything else raises at build time.

Complex values are carried as packed real tensors of shape [..., 2, M]
(index 0 real, index 1 imaginary) so they flow through the real-valued
autodiff graph. ``ComplexTensor`` is a thin view over that layout.

Gradients: rfft is linear, so its adjoint is an unnormalized inverse FFT of
the zero-extended cotangent spectrum; the irfft adjoint doubles interior
bins to account for Hermitian symmetry and drops the imaginary parts of the
DC and Nyquist bins (which the forward ignores).
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor, accumulate_grad, op_node
from .errors import ConfigurationError, DimensionError

_bitrev_cache: dict[int, np.ndarray] = {}
_twiddle_cache: dict[tuple[int, bool], np.ndarray] = {}


def require_pow2(n: int, what: str = "length") -> None:
    if n < 2 or n & (n - 1):
        raise ConfigurationError(f"{what} must be a power of two >= 2, got {n}")


def _bitrev(n: int) -> np.ndarray:
    idx = _bitrev_cache.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            idx[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
        _bitrev_cache[n] = idx
    return idx


def _twiddle(size: int, inverse: bool) -> np.ndarray:
    key = (size, inverse)
    tw = _twiddle_cache.get(key)
    if tw is None:
        sign = 2j if inverse else -2j
        tw = np.exp(sign * np.pi * np.arange(size // 2) / size)
        _twiddle_cache[key] = tw
    return tw


def fft_complex(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Radix-2 FFT along the last axis of a complex array (power-of-two length)."""
    n = x.shape[-1]
    require_pow2(n)
    x = np.ascontiguousarray(x[..., _bitrev(n)])
    size = 2
    while size <= n:
        half = size // 2
        tw = _twiddle(size, inverse).astype(x.dtype, copy=False)
        xv = x.reshape(x.shape[:-1] + (n // size, size))
        a = xv[..., :half]
        b = xv[..., half:] * tw
        x = np.concatenate([a + b, a - b], axis=-1).reshape(x.shape)
        size *= 2
    if inverse:
        x = x / n
    return x


def _complex_dtype(real_dtype) -> np.dtype:
    return np.dtype(np.complex64) if real_dtype == np.float32 else np.dtype(np.complex128)


class ComplexTensor:
    """Complex array carried as a packed real tensor [..., 2, M]."""

    def __init__(self, packed: Tensor, n_signal: int):
        if packed.shape[-2] != 2:
            raise DimensionError(f"packed complex tensor needs a trailing [2, M] block, got {packed.shape}")
        self.packed = packed
        self.n_signal = n_signal  # length of the real signal this spectrum came from

    @property
    def shape(self) -> tuple[int, ...]:
        s = self.packed.shape
        return s[:-2] + (s[-1],)

    @property
    def n_modes(self) -> int:
        return self.packed.shape[-1]

    def real_part(self) -> Tensor:
        sl = engine.narrow(self.packed, -2, 0, 1)
        return engine.reshape(sl, self.shape)

    def imag_part(self) -> Tensor:
        sl = engine.narrow(self.packed, -2, 1, 1)
        return engine.reshape(sl, self.shape)

    def complex_numpy(self) -> np.ndarray:
        d = self.packed.data
        return d[..., 0, :] + 1j * d[..., 1, :]


def rfft(x: Tensor) -> ComplexTensor:
    """Real-to-complex FFT along the last axis; keeps bins 0..N/2."""
    n = x.shape[-1]
    require_pow2(n, "FFT length")
    m = n // 2 + 1
    cdt = _complex_dtype(x.dtype)
    spec = fft_complex(x.data.astype(cdt))
    data = np.stack([spec.real[..., :m], spec.imag[..., :m]], axis=-2).astype(x.dtype)
    lead = int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
    logn = (n - 1).bit_length()
    cnt = lead * n * logn // 2
    engine._record("fft", cnt, cnt)

    def bw(g):
        if x.requires_grad:
            gc = (g[..., 0, :] + 1j * g[..., 1, :]).astype(cdt)
            gpad = np.zeros(x.shape[:-1] + (n,), dtype=cdt)
            gpad[..., :m] = gc
            gx = fft_complex(gpad, inverse=True) * n
            accumulate_grad(x, gx.real.astype(x.dtype))

    return ComplexTensor(op_node(data, (x,), bw), n)


def irfft(cx: ComplexTensor, n: int) -> Tensor:
    """Complex-to-real inverse FFT; expects the packed spectrum of a length-n signal."""
    require_pow2(n, "FFT length")
    m = n // 2 + 1
    if cx.n_modes != m:
        raise DimensionError(f"spectrum has {cx.n_modes} bins; length {n} needs {m}")
    packed = cx.packed
    cdt = _complex_dtype(packed.dtype)
    half = (packed.data[..., 0, :] + 1j * packed.data[..., 1, :]).astype(cdt)
    full = np.zeros(half.shape[:-1] + (n,), dtype=cdt)
    full[..., :m] = half
    full[..., m:] = np.conj(half[..., 1:m - 1])[..., ::-1]
    data = fft_complex(full, inverse=True).real.astype(packed.dtype)
    lead = int(np.prod(data.shape[:-1], dtype=np.int64)) if data.ndim > 1 else 1
    logn = (n - 1).bit_length()
    cnt = lead * n * logn // 2
    engine._record("fft", cnt, cnt)

    def bw(g):
        if packed.requires_grad:
            spec = fft_complex(g.astype(cdt))
            scale = np.full(m, 2.0 / n)
            scale[0] = 1.0 / n
            scale[-1] = 1.0 / n
            gre = spec.real[..., :m] * scale
            gim = spec.imag[..., :m] * scale
            gim[..., 0] = 0.0
            gim[..., -1] = 0.0
            accumulate_grad(packed, np.stack([gre, gim], axis=-2).astype(packed.dtype))

    return op_node(data, (packed,), bw)


def truncate_modes(cx: ComplexTensor, modes: int) -> ComplexTensor:
    """Keep the lowest ``modes`` bins (clamped to what the spectrum has)."""
    keep = min(modes, cx.n_modes)
    return ComplexTensor(engine.narrow(cx.packed, -1, 0, keep), cx.n_signal)


def pad_modes(cx: ComplexTensor, n_modes: int) -> ComplexTensor:
    return ComplexTensor(engine.pad_axis(cx.packed, -1, n_modes), cx.n_signal)


def spectral_mix(cx: ComplexTensor, w: Tensor) -> ComplexTensor:
    """Complex channel mixing per retained mode.

    Input spectrum [B?, C_in, 2, M] and packed weights [C_out, C_in, 2, M'] with
    M' >= M (extra weight modes are ignored); output [B?, C_out, 2, M]. Each
    complex multiply costs 4 real multiplies and 2 real adds; accumulation over
    C_in adds 2*(C_in-1) more per output element.
    """
    x = cx.packed
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c_in, _, m = xd.shape
    if w.ndim != 4 or w.shape[1] != c_in or w.shape[2] != 2:
        raise DimensionError(f"weights {w.shape} do not match spectrum {x.shape}")
    if w.shape[-1] < m:
        raise DimensionError(f"weights cover {w.shape[-1]} modes, spectrum has {m}")
    c_out = w.shape[0]
    wr = w.data[:, :, 0, :m]
    wi = w.data[:, :, 1, :m]
    xr = xd[:, :, 0, :]
    xi = xd[:, :, 1, :]
    out_r = np.einsum("bcm,ocm->bom", xr, wr, optimize=True) - np.einsum("bcm,ocm->bom", xi, wi, optimize=True)
    out_i = np.einsum("bcm,ocm->bom", xr, wi, optimize=True) + np.einsum("bcm,ocm->bom", xi, wr, optimize=True)
    data = np.stack([out_r, out_i], axis=-2).astype(x.data.dtype)
    m_cnt = b * 4 * m * c_in * c_out
    a_cnt = b * m * (2 * c_in * c_out + 2 * (c_in - 1) * c_out)
    engine._record("spectral_mix", m_cnt, a_cnt)

    def bw(g):
        # op_node data keeps the batch axis even for unbatched calls (the
        # squeeze happens in a downstream reshape node), so g is batched here.
        gr = g[:, :, 0, :]
        gi = g[:, :, 1, :]
        if x.requires_grad:
            gxr = np.einsum("bom,ocm->bcm", gr, wr, optimize=True) + np.einsum("bom,ocm->bcm", gi, wi, optimize=True)
            gxi = np.einsum("bom,ocm->bcm", gi, wr, optimize=True) - np.einsum("bom,ocm->bcm", gr, wi, optimize=True)
            gx = np.stack([gxr, gxi], axis=-2).astype(x.data.dtype)
            accumulate_grad(x, gx[0] if squeeze else gx)
        if w.requires_grad:
            gwr = np.einsum("bom,bcm->ocm", gr, xr, optimize=True) + np.einsum("bom,bcm->ocm", gi, xi, optimize=True)
            gwi = np.einsum("bom,bcm->ocm", gi, xr, optimize=True) - np.einsum("bom,bcm->ocm", gr, xi, optimize=True)
            gw = np.zeros_like(w.data)
            gw[:, :, 0, :m] = gwr
            gw[:, :, 1, :m] = gwi
            accumulate_grad(w, gw)

    out = op_node(data, (x, w), bw)
    if squeeze:
        out = engine.reshape(out, data.shape[1:])
    return ComplexTensor(out, cx.n_signal)
