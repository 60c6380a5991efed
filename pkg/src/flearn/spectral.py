"""2-D discrete Fourier transform with reverse-mode rules.

Forward transform is unnormalised,

    F(u, v) = sum_x sum_y f(x, y) exp(-2j*pi*(u*x/M + v*y/N)),

the inverse carries the 1/(M*N) factor.  DC sits at index (0, 0); nothing
is shifted.  Power-of-two axes go through an iterative radix-2 FFT, other
lengths through a direct DFT matrix product.

Complex intermediates are held in private Tensor nodes with complex data.
Their gradient slot stores dL/dRe + 1j*dL/dIm, so the reverse rule of a
complex-linear map A is simply A^H applied to that slot.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor

MAG_EPS = 1e-12


@dataclass(frozen=True)
class ComplexPair:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


# --------------------------------------------------------------------------
# raw numpy kernels


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _radix2_plan(n: int):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    twiddle = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    return rev, twiddle


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def _radix2(a: np.ndarray, axis: int) -> np.ndarray:
    """Iterative radix-2 DIT FFT along axis -1 or -2 (ping-pong buffers)."""
    n = a.shape[axis]
    rev, twiddle = _radix2_plan(n)
    x = a[..., rev] if axis == -1 else a[..., rev, :]
    buf = np.empty_like(x)
    size = 2
    while size <= n:
        half = size // 2
        tw = twiddle[:: n // size]
        if axis == -1:
            src = x.reshape(*x.shape[:-1], n // size, size)
            dst = buf.reshape(src.shape)
            even, odd = src[..., :half], src[..., half:] * tw
            np.add(even, odd, out=dst[..., :half])
            np.subtract(even, odd, out=dst[..., half:])
        else:
            src = x.reshape(*x.shape[:-2], n // size, size, x.shape[-1])
            dst = buf.reshape(src.shape)
            even, odd = src[..., :half, :], src[..., half:, :] * tw[:, None]
            np.add(even, odd, out=dst[..., :half, :])
            np.subtract(even, odd, out=dst[..., half:, :])
        x, buf = buf, x
        size *= 2
    return x


def _fft_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == 1:
        return a.copy()
    if _is_pow2(n):
        return _radix2(a, axis)
    mat = _dft_matrix(n)
    return a @ mat.T if axis == -1 else mat @ a


def fft2_array(a: np.ndarray) -> np.ndarray:
    """Unnormalised row-column 2-D transform over the last two axes."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim < 2:
        raise ShapeError(f"fft2 needs at least 2 axes, got shape {a.shape}")
    return _fft_axis(_fft_axis(a, -1), -2)


def ifft2_array(a: np.ndarray) -> np.ndarray:
    m, n = a.shape[-2:]
    return np.conj(fft2_array(np.conj(a))) / (m * n)


def _adjoint_fft2(g: np.ndarray) -> np.ndarray:
    # W^H g, W the unnormalised forward matrix
    return np.conj(fft2_array(np.conj(g)))


# --------------------------------------------------------------------------
# differentiable ops


def _split(z: Tensor) -> ComplexPair:
    re = Tensor(z.data.real.copy(), (z,), lambda g: z._accumulate(g.astype(np.complex128)), "re")
    im = Tensor(z.data.imag.copy(), (z,), lambda g: z._accumulate(1j * g), "im")
    return ComplexPair(re, im)


def _join(pair: ComplexPair) -> Tensor:
    re, im = pair.real, pair.imag

    def bw(g):
        if re.requires_grad:
            re._accumulate(g.real)
        if im.requires_grad:
            im._accumulate(g.imag)

    return Tensor(pair.to_complex(), (re, im), bw, "join")


def dft2(f) -> ComplexPair:
    """Forward 2-D DFT of a real Tensor[C,M,N] (or of a ComplexPair)."""
    if isinstance(f, ComplexPair):
        z = _join(f)
        node = Tensor(fft2_array(z.data), (z,), lambda g: z._accumulate(_adjoint_fft2(g)), "dft2")
    else:
        if f.data.ndim < 2:
            raise ShapeError(f"dft2 needs at least 2 axes, got {f.shape}")
        node = Tensor(fft2_array(f.data), (f,),
                      lambda g: f._accumulate(_adjoint_fft2(g).real), "dft2")
    return _split(node)


def idft2(pair: ComplexPair) -> ComplexPair:
    """Inverse 2-D DFT with 1/(M*N) normalisation; result is generally complex."""
    z = _join(pair)
    m, n = z.shape[-2:]
    node = Tensor(ifft2_array(z.data), (z,),
                  lambda g: z._accumulate(fft2_array(g) / (m * n)), "idft2")
    return _split(node)


def magnitude(pair: ComplexPair, eps: float = MAG_EPS) -> Tensor:
    re, im = pair.real, pair.imag
    mag = np.hypot(re.data, im.data)
    denom = np.maximum(mag, eps)

    def bw(g):
        if re.requires_grad:
            re._accumulate(g * re.data / denom)
        if im.requires_grad:
            im._accumulate(g * im.data / denom)

    return Tensor(mag, (re, im), bw, "magnitude")


def dft2_bruteforce(f: Tensor) -> ComplexPair:
    """Literal double sum over every (u, v, x, y); O(M^2 N^2), test use only."""
    data = f.data
    m, n = data.shape[-2:]
    x = np.arange(m)[None, None, :, None]
    y = np.arange(n)[None, None, None, :]
    u = np.arange(m)[:, None, None, None]
    v = np.arange(n)[None, :, None, None]
    kernel = np.exp(-2j * np.pi * (u * x / m + v * y / n))
    out = np.einsum("uvxy,...xy->...uv", kernel, data)
    return ComplexPair(Tensor(out.real.copy()), Tensor(out.imag.copy()))
