"""Seeded random streams and the small symmetric linear-algebra kernel.

Sampling is backed by numpy's ``PCG64`` bit generator keyed by
``SeedSequence(seed, spawn_key=(stream_id,))``; normal variates use numpy's
ziggurat transform (``Generator.standard_normal``), which is platform
independent for a fixed numpy release.
"""

from __future__ import annotations

import ctypes
import ctypes.util

import numpy as np

from .errors import InvalidParameterError, NotPSDError, ShapeError

_MASK64 = (1 << 64) - 1


class RngStream:
    """A single-owner random stream identified by ``(seed, stream_id)``.

    Streams with the same key produce the same sequence; different
    ``stream_id`` values spawn independent children of the same seed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _MASK64) or not (0 <= stream_id <= _MASK64):
            raise InvalidParameterError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    # state round-trips through JSON (checkpoint metadata)
    def get_state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id,
                "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"])
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape=None, low=-1.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def integers(self, high: int) -> int:
        """One integer uniform on ``0..high-1``."""
        return int(self.generator.integers(0, high))

    def choice(self, population, size: int) -> np.ndarray:
        """``size`` distinct draws from ``population``, order as drawn."""
        if isinstance(population, (int, np.integer)):
            return self.generator.choice(int(population), size=size, replace=False)
        return self.generator.choice(np.asarray(population), size=size, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def gaussian_sample(rng: RngStream, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` i.i.d. samples from N(mean, std**2)."""
    if std < 0:
        raise InvalidParameterError(f"std must be non-negative, got {std}")
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    return mean + std * rng.normal(n)


class SymEigDecomposition:
    """Eigen-decomposition of a symmetric PSD matrix, eigenvalues descending."""

    def __init__(self, eigenvalues: np.ndarray, eigenvectors: np.ndarray):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _check_symmetric(m: np.ndarray, tol: float) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol * scale:
        raise ShapeError(f"matrix is not symmetric: max |m - m^T| = {asym:.3g}")
    return m


def sym_eig_psd(m: np.ndarray, tol: float | None = None) -> SymEigDecomposition:
    """Eigen-decompose a symmetric PSD matrix.

    Eigenvalues with ``|lambda| <= tol`` are clamped to ``max(lambda, 0)``; any
    eigenvalue below ``-tol`` means the matrix is not PSD. ``tol`` defaults to
    ``1e-10 * max|lambda|``. The symmetry check uses ``1e-10`` when ``tol`` is
    not given.
    """
    m = _check_symmetric(m, 1e-10 if tol is None else tol)
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    w, v = w[::-1], v[:, ::-1]
    if tol is None:
        tol = 1e-10 * (float(np.max(np.abs(w))) if w.size else 0.0)
    if w.size and w[-1] < -tol:
        raise NotPSDError(f"matrix has eigenvalue {w[-1]:.6g} < -{tol:.3g}")
    w = np.maximum(w, 0.0)
    return SymEigDecomposition(np.ascontiguousarray(w), np.ascontiguousarray(v))


def sqrtm_psd(m: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Symmetric PSD square root ``S`` with ``S @ S == m``."""
    eig = sym_eig_psd(m, tol)
    v = eig.eigenvectors
    s = (v * np.sqrt(eig.eigenvalues)) @ v.T
    return 0.5 * (s + s.T)


# glibc mallopt parameters
_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold: int = 32 * 1024 * 1024) -> bool:
    """Keep freed parameter-sized buffers in the heap instead of returning them to the OS.

    Training allocates many short-lived arrays of a few megabytes; with glibc's
    defaults each one is a fresh mmap whose pages fault in on first touch.
    Raising the mmap and trim thresholds lets them be reused. Process-wide and
    glibc-only; returns whether the settings were applied.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    return bool(mallopt(_M_MMAP_THRESHOLD, threshold)) and bool(mallopt(_M_TRIM_THRESHOLD, 2 * threshold))
