"""Deterministic sampling and the small dense linear-algebra kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

_U64 = (1 << 64) - 1
MAX_CONDITION = 1e12


class SingularMatrixError(ValueError):
    """Raised when a matrix that must be inverted is numerically singular."""


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    ``stream_id`` is the path of split indices from the root seed. Two streams
    with equal ``(seed, stream_id)`` produce identical samples on every
    platform; splitting never advances or shares state with the parent.
    """

    seed: int
    stream_id: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _U64)
        object.__setattr__(self, "stream_id", tuple(int(k) & _U64 for k in self.stream_id))

    def split(self, k: int) -> RngStream:
        if k < 0:
            raise ValueError("split index must be non-negative")
        return RngStream(self.seed, self.stream_id + (k,))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(seq))


def as_stream(rng: RngStream | int) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(int(rng))


def sample_gaussian_matrix(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got ({rows}, {cols})")
    return rng.generator().standard_normal((rows, cols))


def random_orthogonal(dim: int, gen: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def sample_spd(dim: int, eig_min: float, eig_max: float, rng: RngStream) -> np.ndarray:
    """Random ``Q diag(lam) Q^T`` with log-uniform eigenvalues in ``[eig_min, eig_max]``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not (0 < eig_min <= eig_max) or not np.isfinite(eig_max):
        raise ValueError(f"invalid eigenvalue range [{eig_min}, {eig_max}]")
    gen = rng.generator()
    q = random_orthogonal(dim, gen)
    lam = np.exp(gen.uniform(np.log(eig_min), np.log(eig_max), size=dim))
    if eig_min == eig_max:
        lam[:] = eig_min
    a = (q * lam) @ q.T
    return 0.5 * (a + a.T)


def check_spd(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate a strictly positive-definite matrix and return its eigenvalues."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(np.linalg.norm(m), 1e-300)
    if np.linalg.norm(m - m.T) > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    if lam[0] <= 0:
        raise SingularMatrixError(f"{name} is not positive-definite (min eigenvalue {lam[0]:.3g})")
    if lam[-1] / lam[0] > MAX_CONDITION:
        raise SingularMatrixError(f"{name} is numerically singular (condition {lam[-1] / lam[0]:.3g})")
    return lam


def spd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric square root via the eigendecomposition."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries")
    lam, v = np.linalg.eigh(0.5 * (m + m.T))
    if lam[0] <= 0:
        raise SingularMatrixError("matrix is not positive-definite")
    s = (v * np.sqrt(lam)) @ v.T
    return 0.5 * (s + s.T)


def spd_inv_sqrt(m: np.ndarray) -> np.ndarray:
    lam, v = np.linalg.eigh(0.5 * (np.asarray(m, dtype=float) + np.asarray(m, dtype=float).T))
    if lam[0] <= 0:
        raise SingularMatrixError("matrix is not positive-definite")
    s = (v / np.sqrt(lam)) @ v.T
    return 0.5 * (s + s.T)


def spd_inverse(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    check_spd(m)
    c = scipy.linalg.cho_factor(m, lower=True)
    inv = scipy.linalg.cho_solve(c, np.eye(m.shape[0]))
    return 0.5 * (inv + inv.T)


def ridge_solve(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """``argmin_w ||Xw - y||^2 + lam ||w||^2`` through a Cholesky solve."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    d = X.shape[1]
    gram = X.T @ X + lam * np.eye(d)
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= ev[-1] / MAX_CONDITION:
        raise SingularMatrixError(f"normal equations are numerically singular (rank(X) < d with lambda = {lam:g})")
    try:
        c = scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("normal equations are singular") from exc
    return scipy.linalg.cho_solve(c, X.T @ y)


def ridge_solve_batch(X: np.ndarray, y: np.ndarray, lam: float, reg: np.ndarray | None = None) -> np.ndarray:
    """Batched ridge: ``(X^T X + lam R)^{-1} X^T y`` over the leading axis.

    ``R`` defaults to the identity. Cholesky is used to certify positive
    definiteness before the triangular solves.
    """
    d = X.shape[-1]
    gram = np.einsum("bni,bnj->bij", X, X)
    gram += lam * (np.eye(d) if reg is None else reg)
    rhs = np.einsum("bni,bn->bi", X, y)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("batched normal equations are singular") from exc
    z = np.linalg.solve(chol, rhs[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), z)[..., 0]
