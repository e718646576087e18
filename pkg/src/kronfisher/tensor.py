"""Deterministic f64 tensor arithmetic, seeded RNG, and a symmetric eigensolver.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 and C (row-major)
layout; every function in this module validates and returns that representation.
All randomness flows through :class:`SeededRng`, a counter-based SplitMix64
stream with fixed constants, so identical seeds give identical draw sequences.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DimensionError, ValidationError

# SplitMix64 constants (Steele, Lea & Flood 2014).
_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_M2 = np.uint64(0x94D049BB133111EB)
_U64_TO_UNIT = 1.0 / float(1 << 53)


def as_f64(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contains NaN or Inf entries")
    return a


class SeededRng:
    """Counter-based SplitMix64 generator producing u64, uniform and gaussian draws.

    The stream is a pure function of ``(seed, counter)``: output ``i`` mixes the
    state ``seed + (i+1) * 0x9E3779B97F4A7C15`` through the SplitMix64 finalizer.
    Uniform doubles use the top 53 bits; gaussians use a Box-Muller pair per two
    uniforms. The integer stream is platform-exact; gaussian draws additionally
    depend on the platform's libm log/cos/sin.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def spawn(self, salt: int) -> "SeededRng":
        """Derive an independent stream; used for per-layer / per-worker seeding."""
        child = SeededRng(0)
        with np.errstate(over="ignore"):
            base = np.array([self.seed], dtype=np.uint64)
            base += np.array([salt + 1], dtype=np.uint64) * _SM64_GAMMA
        child.seed = _mix(base)[0]
        return child

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValidationError("draw count must be nonnegative")
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            state = self.seed + idx * _SM64_GAMMA
        return _mix(state)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _U64_TO_UNIT

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` standard normal draws via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # in (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` integers in [0, bound) via 53-bit uniforms (desk-scale bound)."""
        if bound <= 0:
            raise ValidationError("bound must be positive")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by the stream."""
        perm = np.arange(n)
        draws = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = min(int(draws[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def categorical(self, probs: np.ndarray, n: int) -> np.ndarray:
        """``n`` class indices sampled from the given probability vector."""
        p = as_f64(probs)
        cdf = np.cumsum(p)
        if not np.isclose(cdf[-1], 1.0, atol=1e-9):
            raise ValidationError("probabilities must sum to 1")
        cdf[-1] = 1.0
        return np.searchsorted(cdf, self.uniform(n), side="right").clip(0, p.size - 1)


def _mix(state: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = state.astype(np.uint64)
        z ^= z >> np.uint64(30)
        z *= _SM64_M1
        z ^= z >> np.uint64(27)
        z *= _SM64_M2
        z ^= z >> np.uint64(31)
    return z


def gaussian_fill(rng: SeededRng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """i.i.d. N(mean, std^2) tensor drawn from the seeded stream."""
    if std < 0:
        raise ValidationError("std must be nonnegative")
    n = int(np.prod(shape)) if np.iterable(shape) else int(shape)
    out = mean + std * rng.gaussian(n)
    return out.reshape(shape)


def matmul(a, b) -> np.ndarray:
    """Matrix product with f64 accumulation; raises DimensionError on mismatch."""
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 64):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted descending
    and eigenvectors as the corresponding columns. The sweep loop stops once
    the off-diagonal Frobenius norm drops below ``tol * ||a||_F``.
    """
    a = as_f64(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("sym_eig expects a square matrix")
    n = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a))) if n else 1.0)
    if float(np.max(np.abs(a - a.T), initial=0.0)) > 1e-9 * scale:
        raise ValidationError("matrix is not symmetric within 1e-9")

    m = 0.5 * (a + a.T)  # exact symmetrization keeps rotations well-defined
    v = np.eye(n)
    norm = float(np.linalg.norm(m))
    if n <= 1 or norm == 0.0:
        vals = np.diag(m).copy()
        order = np.argsort(vals)[::-1]
        return vals[order], v[:, order]

    threshold = tol * norm
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = float(np.sqrt(np.sum(m[off_mask] ** 2)))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= 1e-300:
                    continue
                app, aqq = m[p, p], m[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                elif abs(tau) > 1e150:  # asymptotic form, avoids tau*tau overflow
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp = m[p, :].copy()
                rq = m[q, :].copy()
                m[p, :] = c * rp - s * rq
                m[q, :] = s * rp + c * rq
                cp = m[:, p].copy()
                cq = m[:, q].copy()
                m[:, p] = c * cp - s * cq
                m[:, q] = s * cp + c * cq
                m[p, q] = 0.0
                m[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(f"Jacobi sweeps did not converge in {max_sweeps} iterations")

    vals = np.diag(m).copy()
    order = np.argsort(vals)[::-1]
    return vals[order], v[:, order]


def dft2_magnitude(a) -> np.ndarray:
    """Magnitude of the 2-D discrete Fourier transform, evaluated directly.

    out[k, l] = | sum_p sum_q a[p, q] * exp(-2*pi*i*(p*k/m + q*l/n)) |

    Computed from the definition with complex f64 accumulation (no FFT
    factorization); intended for the small matrices of the spectra reports.
    """
    a = as_f64(a)
    if a.ndim != 2:
        raise DimensionError("dft2_magnitude expects a 2-D matrix")
    m, n = a.shape
    if m * n > 10**6:
        raise ValidationError("matrix too large for the direct transform")
    p = np.arange(m)
    q = np.arange(n)
    fm = np.exp(-2j * np.pi * np.outer(p, p) / m)  # fm[k, p]
    fn = np.exp(-2j * np.pi * np.outer(q, q) / n)  # fn[l, q]
    return np.abs(fm @ a.astype(np.complex128) @ fn.T)
