"""Covariance kernels for the two-level linear mixed model.

The model is ``Y_ij = X_ij @ beta + Z_ij @ b_i + eps_ij`` with
``eps ~ N(0, sigma2)`` and ``b_i ~ N(0, sigma2 * V)``.  The relative
covariance ``V`` is parameterized by its lower-triangular factor
``V = L @ L.T`` with non-negative diagonal; independence constraints from
the formula make ``L`` block diagonal.

The marginal covariance of a group is ``sigma2 * (I + Z V Z.T)``; for a
pair of rows this is a 2x2 matrix whose determinant and inverse have
closed forms, which is what makes the pairwise objective cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: Box for the optimizer: diagonal entries of L live in [0, THETA_DIAG_MAX],
#: off-diagonals in [-THETA_OFFDIAG_MAX, THETA_OFFDIAG_MAX].  V is relative
#: to sigma2, so 100 is a generous ceiling; finite bounds are required by
#: the bound-constrained minimizer.
THETA_DIAG_MAX = 100.0
THETA_OFFDIAG_MAX = 100.0

#: 2x2 determinant tolerance.  The pair kernel has unit diagonal plus a PSD
#: term, so true singularity is impossible in exact arithmetic; this only
#: catches overflow or corrupted inputs.
PAIR_DET_TOL = 1e-14


class SingularPairError(ValueError):
    """A 2x2 pair block was numerically singular."""


@dataclass(frozen=True)
class ThetaStructure:
    """Shape of the relative-covariance factor L.

    ``blocks`` lists the sizes of the independent diagonal blocks induced
    by the formula's random-effect groups; their sum is ``q``.  The free
    parameters are the lower-triangular entries inside the blocks, ordered
    column-major within each block.
    """

    blocks: tuple[int, ...]

    @property
    def q(self) -> int:
        return sum(self.blocks)

    @property
    def n_free(self) -> int:
        return sum(b * (b + 1) // 2 for b in self.blocks)

    def free_index_pairs(self) -> list[tuple[int, int]]:
        """(row, col) of each free entry of L, column-major per block."""
        out = []
        off = 0
        for b in self.blocks:
            for j in range(b):
                for i in range(j, b):
                    out.append((off + i, off + j))
            off += b
        return out

    def expand(self, free: np.ndarray) -> np.ndarray:
        """Build the q x q factor L from the free-parameter vector."""
        free = np.asarray(free, dtype=float)
        if free.shape != (self.n_free,):
            raise ValueError(
                f"expected {self.n_free} free parameters, got {free.shape}")
        L = np.zeros((self.q, self.q))
        for val, (i, j) in zip(free, self.free_index_pairs()):
            L[i, j] = val
        return L

    def collapse(self, L: np.ndarray) -> np.ndarray:
        return np.array([L[i, j] for i, j in self.free_index_pairs()])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds for the free parameters (diagonal kept >= 0)."""
        lower, upper = [], []
        for i, j in self.free_index_pairs():
            if i == j:
                lower.append(0.0)
                upper.append(THETA_DIAG_MAX)
            else:
                lower.append(-THETA_OFFDIAG_MAX)
                upper.append(THETA_OFFDIAG_MAX)
        return np.array(lower), np.array(upper)


@dataclass(frozen=True)
class ThetaParam:
    """Variance-component parameter: lower-triangular factor of V.

    Invariants enforced at construction: diagonal of L non-negative,
    entries outside the declared blocks exactly zero.
    """

    structure: ThetaStructure
    L: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        q = self.structure.q
        if L.shape != (q, q):
            raise ValueError(f"L must be {q}x{q}, got {L.shape}")
        if np.any(np.diag(L) < 0):
            raise ValueError("diagonal of L must be non-negative")
        mask = np.zeros((q, q), dtype=bool)
        for i, j in self.structure.free_index_pairs():
            mask[i, j] = True
        if np.any(L[~mask] != 0.0):
            raise ValueError("L has nonzero entries outside its blocks")
        object.__setattr__(self, "L", L)

    @classmethod
    def from_free(cls, structure: ThetaStructure,
                  free: np.ndarray) -> "ThetaParam":
        return cls(structure, structure.expand(free))

    @property
    def q(self) -> int:
        return self.structure.q

    @property
    def free(self) -> np.ndarray:
        return self.structure.collapse(self.L)

    @property
    def entries(self) -> np.ndarray:
        """Full lower triangle of L, column-major, length q(q+1)/2."""
        q = self.q
        return np.concatenate([self.L[j:, j] for j in range(q)]) \
            if q else np.empty(0)

    def boundary(self, tol: float = 1e-3) -> bool:
        """True when any diagonal of L is within ``tol`` of zero."""
        d = np.diag(self.L)
        return bool(d.size) and bool(np.any(d <= tol))


def theta_to_V(theta: ThetaParam) -> np.ndarray:
    """Relative covariance V = L @ L.T (exact zeros across blocks)."""
    return theta.L @ theta.L.T


def pair_xi(V: np.ndarray, z_j: np.ndarray, z_k: np.ndarray) -> np.ndarray:
    """2x2 marginal correlation block for one pair of observations.

    Xi = I_2 + [z_j; z_k] V [z_j; z_k].T -- symmetric, unit-or-larger
    diagonal, positive definite for any PSD V.
    """
    Z = np.vstack([np.asarray(z_j, dtype=float),
                   np.asarray(z_k, dtype=float)])
    return np.eye(2) + Z @ V @ Z.T


def pair_kernel(xi: np.ndarray, label=None) -> tuple[float, np.ndarray]:
    """Closed-form log-determinant and inverse of a 2x2 SPD block.

    Returns:
        (logdet, inverse) with inverse = [[d, -b], [-b, a]] / det.

    Raises:
        SingularPairError: if det <= PAIR_DET_TOL (overflow/corruption;
            cannot occur for well-formed pair blocks).
    """
    a = float(xi[0, 0])
    b = float(xi[0, 1])
    d = float(xi[1, 1])
    det = a * d - b * b
    if not det > PAIR_DET_TOL:
        where = f" for pair {label}" if label is not None else ""
        raise SingularPairError(
            f"singular 2x2 pair block (det={det:.3e}){where}")
    inv = np.array([[d, -b], [-b, a]]) / det
    return float(np.log(det)), inv


class GroupKernel:
    """Whole-group covariance kernel Xi_i = I + Z_i V Z_i.T.

    Holds a Cholesky factorization so callers get the log-determinant and
    linear solves against Xi_i.  Used by the full-likelihood path, where
    the per-group cost is O(m_i^3).
    """

    def __init__(self, V: np.ndarray, Z: np.ndarray):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        m = Z.shape[0]
        xi = np.eye(m) + Z @ V @ Z.T
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite entries in group covariance")
        self.matrix = xi
        self._cho = cho_factor(xi, lower=True)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self._cho[0]))))

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, np.asarray(rhs, dtype=float))


def group_xi(V: np.ndarray, Z: np.ndarray) -> GroupKernel:
    """Build the m_i x m_i kernel for one group (see GroupKernel)."""
    return GroupKernel(V, Z)


@dataclass
class GroupData:
    """Per-group slice of the model frame plus its sampling probabilities."""

    key: object
    Y: np.ndarray          # (m,)
    X: np.ndarray          # (m, p)
    Z: np.ndarray          # (m, q)
    pi_1: float            # first-stage selection probability of the group
    pi_cond: np.ndarray    # (m,) conditional inclusion probabilities

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.pi_cond = np.asarray(self.pi_cond, dtype=float)
        m = self.Y.shape[0]
        if self.X.shape[0] != m or self.Z.shape[0] != m \
                or self.pi_cond.shape[0] != m:
            raise ValueError(f"inconsistent dimensions in group {self.key!r}")
        if m < 1:
            raise ValueError(f"empty group {self.key!r}")
        for arr in (self.Y, self.X, self.Z):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"missing values in group {self.key!r}")

    @property
    def m(self) -> int:
        return self.Y.shape[0]


def batched_pair_terms(L: np.ndarray, Zp: np.ndarray):
    """Closed-form 2x2 kernel pieces for a stack of pairs.

    Args:
        L: (q, q) lower-triangular factor of V.
        Zp: (n_pairs, 2, q) stacked random-effect rows.

    Returns:
        (a, b, d, det, logdet) arrays of shape (n_pairs,) where the pair
        block is [[a, b], [b, d]].  Computed via U = Zp @ L so that
        Xi = I + U U.T is exactly SPD even on the boundary of the
        parameter space.
    """
    U = Zp @ L                       # (n, 2, q)
    a = 1.0 + np.einsum("nq,nq->n", U[:, 0, :], U[:, 0, :])
    d = 1.0 + np.einsum("nq,nq->n", U[:, 1, :], U[:, 1, :])
    b = np.einsum("nq,nq->n", U[:, 0, :], U[:, 1, :])
    det = a * d - b * b
    if np.any(det <= PAIR_DET_TOL) or not np.all(np.isfinite(det)):
        bad = int(np.argmin(np.where(np.isfinite(det), det, -np.inf)))
        raise SingularPairError(
            f"singular 2x2 pair block at pair index {bad}")
    return a, b, d, det, np.log(det)
