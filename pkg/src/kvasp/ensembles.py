"""Correlated measurement ensembles and structured replica-matrix identities.

Provides the Kronecker-correlated Gaussian measurement model used by the
benchmark, the empirical spectrum that all scalar expectations are taken
over, and two exact structured-matrix tools: a block inverse for matrices of
the form ``1_L (x) B + I_L (x) (A - B)`` and the Fourier factorization of
hierarchically-coupled coupling matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, dft

from .errors import ParameterError, SingularMatrixError

# Eigenvalues of the correlation matrix below this are clamped before the
# principal square root (guards rho -> 1).
_EIG_FLOOR = 1e-14


def philox_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; ``stream`` selects an independent substream.

    Streams are keyed as (seed, stream), so trial i of an experiment always
    sees the same draws regardless of execution order or thread count.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(stream & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class EnsembleConfig:
    """Kronecker-correlated Gaussian measurement ensemble.

    n:     signal dimension N
    alpha: aspect ratio M/N (M = round(alpha * n))
    rho:   correlation factor in [0, 1)
    seed:  64-bit seed for the matrix draw
    """

    n: int
    alpha: float
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if self.m < 1:
            raise ParameterError(
                f"alpha={self.alpha} with n={self.n} gives M < 1")

    @property
    def m(self) -> int:
        return int(round(self.alpha * self.n))


@dataclass(frozen=True)
class ProblemInstance:
    """One realized inference problem: y = H x0 + noise, z0 = H x0."""

    H: np.ndarray
    x0: np.ndarray
    z0: np.ndarray
    y: np.ndarray
    lambda_samples: np.ndarray  # eigenvalues of H^T H

    def __post_init__(self):
        m, n = self.H.shape
        if self.x0.shape != (n,) or self.z0.shape != (m,) or self.y.shape != (m,):
            raise ParameterError("inconsistent instance dimensions")
        if self.lambda_samples.shape != (n,):
            raise ParameterError("lambda_samples must have one entry per column")
        for arr in (self.H, self.x0, self.z0, self.y, self.lambda_samples):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def alpha(self) -> float:
        return self.m / self.n


def kronecker_correlation(rho: float, n: int) -> np.ndarray:
    """Correlation matrix R with R[i, j] = rho^|i - j|."""
    if not 0.0 <= rho < 1.0:
        raise ParameterError(f"rho must lie in [0, 1), got {rho}")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _principal_sqrt(R: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(R)
    w = np.maximum(w, _EIG_FLOOR)
    return (V * np.sqrt(w)) @ V.T


def build_measurement(config: EnsembleConfig,
                      rng: np.random.Generator | None = None):
    """Draw H = H_w R^{1/2} and the empirical spectrum of H^T H.

    H_w has i.i.d. N(0, 1/N) entries; R is the Kronecker correlation matrix.
    Returns (H, lambda_samples) with lambda_samples the eigenvalues of H^T H
    (ascending). Identical config and rng state give bit-identical output.
    """
    if rng is None:
        rng = philox_stream(config.seed)
    n, m = config.n, config.m
    Hw = rng.standard_normal((m, n)) / np.sqrt(n)
    if config.rho == 0.0:
        H = Hw
    else:
        H = Hw @ _principal_sqrt(kronecker_correlation(config.rho, n))
    lam = np.linalg.eigvalsh(H.T @ H)
    lam = np.maximum(lam, 0.0)
    return H, lam


@dataclass(frozen=True)
class BlockInverse:
    """Inverse of Q = 1_L (x) B + I_L (x) (A - B) as two n x n blocks.

    Block (i, j) of Q^{-1} is ``coupling + (i == j) * diag_term``.
    """

    diag_term: np.ndarray
    coupling: np.ndarray
    L: int

    def dense(self) -> np.ndarray:
        n = self.diag_term.shape[0]
        return (np.kron(np.ones((self.L, self.L)), self.coupling)
                + np.kron(np.eye(self.L), self.diag_term))


def structured_inverse(A: np.ndarray, B: np.ndarray, L: int) -> BlockInverse:
    """Invert Q = 1_L (x) B + I_L (x) (A - B) using its block structure.

    Q has A on the diagonal blocks and B everywhere else. The inverse has
    (A - B)^{-1} on the diagonal and the same rank-one-in-blocks correction
    -[(A - B) B^{-1} (A - B) + L (A - B)]^{-1} in every block. B = 0 is the
    block-diagonal special case.
    """
    if L < 1:
        raise ParameterError(f"L must be >= 1, got {L}")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape != (n, n):
        raise ParameterError("A and B must be square with equal shape")
    if not np.any(B):
        try:
            return BlockInverse(np.linalg.inv(A), np.zeros_like(A), L)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(str(exc), stage="structured-inverse") from exc
    try:
        D = A - B
        D_inv = np.linalg.inv(D)
        core = D @ np.linalg.inv(B) @ D + L * D
        coupling = -np.linalg.inv(core)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc), stage="structured-inverse") from exc
    return BlockInverse(D_inv, coupling, L)


@dataclass(frozen=True)
class KrsbMatrixParams:
    """Parameters of a hierarchically-coupled (tau+1) x (tau+1) matrix.

    The matrix couples one reference row/column (weight C on the diagonal, D
    to every replica) to tau replicas whose coupling block is
    ``F 1_tau + chi I_tau + sum_k H_k I (x) 1_{block k}`` with nested block
    sizes ``ladder_sizes``.
    """

    C: float
    D: float
    F: float
    chi: float
    H_levels: tuple
    ladder_sizes: tuple  # nested block sizes, ascending, each dividing tau
    tau: int

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.ladder_sizes)
        if len(sizes) != len(self.H_levels):
            raise ParameterError("one block size per coupling level required")
        prev = 1
        for s in sizes:
            if s < 1 or s % prev != 0:
                raise ParameterError(
                    f"block sizes must be nested divisors, got {sizes}")
            prev = s
        if sizes and self.tau % sizes[-1] != 0:
            raise ParameterError(
                f"largest block size {sizes[-1]} must divide tau={self.tau}")
        if self.tau < 1:
            raise ParameterError(f"tau must be >= 1, got {self.tau}")
        object.__setattr__(self, "ladder_sizes", sizes)
        object.__setattr__(self, "H_levels", tuple(float(h) for h in self.H_levels))


def krsb_matrix(params: KrsbMatrixParams) -> np.ndarray:
    """Assemble the dense (tau+1) x (tau+1) matrix from its parameters."""
    tau = params.tau
    A = params.F * np.ones((tau, tau)) + params.chi * np.eye(tau)
    for h, size in zip(params.H_levels, params.ladder_sizes):
        A += h * np.kron(np.eye(tau // size), np.ones((size, size)))
    Q = np.empty((tau + 1, tau + 1))
    Q[0, 0] = params.C
    Q[0, 1:] = params.D
    Q[1:, 0] = params.D
    Q[1:, 1:] = A
    return Q


def krsb_build_and_decompose(params: KrsbMatrixParams):
    """Build Q and its factorization Q = F_factor D_q F_factor^H.

    F_factor is block-diagonal: a 1 for the reference coordinate and a
    Kronecker product of normalized DFT matrices (outermost to innermost
    block ratio) for the replicas. D_q is diagonal apart from a 2x2 corner
    coupling the reference coordinate to the uniform replica mode.
    """
    Q = krsb_matrix(params)
    tau = params.tau
    sizes = params.ladder_sizes

    # Kronecker chain of normalized DFTs, largest blocks first.
    factors = []
    prev = tau
    for size in reversed(sizes):
        ratio = prev // size
        factors.append(dft(ratio) / np.sqrt(ratio))
        prev = size
    factors.append(dft(prev) / np.sqrt(prev))
    U = factors[0]
    for f in factors[1:]:
        U = np.kron(U, f)

    diag = params.chi * np.ones(tau)
    diag[0] += tau * params.F
    for h, size in zip(params.H_levels, sizes):
        diag[::size] += size * h
    D_q = np.diag(np.concatenate(([params.C], diag))).astype(complex)
    D_q[0, 1] = D_q[1, 0] = np.sqrt(tau) * params.D

    F_factor = block_diag(np.ones((1, 1)), U)
    return Q, F_factor, D_q
