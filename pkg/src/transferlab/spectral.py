"""Eigen-solvers for nonnegative operators on weighted partitions.

Operators use the mass-flow convention: ``matrix[i, j]`` is the fraction of
cell ``i``'s mass sent to cell ``j`` (for a map ``T`` discretized on cells
``A_i`` this is ``m(A_i & T^-1 A_j) / m(A_i)``).  A *density* is a vector of
cell values ``f``; the operator pushes it forward through the
weight-conjugated transpose.  A *functional* is a coefficient vector ``nu``
paired with densities as ``sum_i nu_i f_i w_i``; it evolves by the plain
matrix action ``matrix @ nu``.  With this convention the all-ones functional
is the Lebesgue integral, and it is a fixed left vector of every
row-stochastic operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

ROW_SUM_TOL = 1e-12


class NonConvergence(RuntimeError):
    """Power iteration did not reach the requested residual."""


class SignError(RuntimeError):
    """Dominant eigenvector changed sign after convergence (non-primitive operator)."""


class DegenerateGap(RuntimeError):
    """Second eigenvalue is not separable from the rest of the spectrum."""


class DimTooLarge(ValueError):
    """Dense spectral oracle refused the problem size."""


class DimensionMismatch(ValueError):
    pass


def _row_sums(mat) -> np.ndarray:
    return np.asarray(mat.sum(axis=1)).ravel()


def _min_entry(mat) -> float:
    if sp.issparse(mat):
        return float(mat.data.min()) if mat.nnz else 0.0
    return float(mat.min()) if mat.size else 0.0


@dataclass(eq=False)
class FiniteOperator:
    """Nonnegative matrix with cell weights; treat as immutable after creation."""

    matrix: object
    weights: np.ndarray
    stochastic: bool = False
    substochastic: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.weights.size
        if self.matrix.shape != (n, n):
            raise DimensionMismatch(f"matrix {self.matrix.shape} vs {n} weights")
        if self.weights.min() <= 0.0:
            raise ValueError("cell weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("cell weights must sum to 1")
        if _min_entry(self.matrix) < -1e-14:
            raise ValueError("operator entries must be nonnegative")
        rs = self.row_sums
        if self.stochastic and np.abs(rs - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("stochastic flag violated by row sums")
        if self.substochastic and rs.max() > 1.0 + ROW_SUM_TOL:
            raise ValueError("substochastic flag violated by row sums")

    @classmethod
    def from_matrix(cls, matrix, weights, meta=None) -> "FiniteOperator":
        """Build an operator, inferring the row-sum flags."""
        rs = _row_sums(matrix)
        stoch = bool(np.abs(rs - 1.0).max() <= ROW_SUM_TOL)
        sub = bool(rs.max() <= 1.0 + ROW_SUM_TOL)
        return cls(matrix, weights, stochastic=stoch, substochastic=sub,
                   meta=dict(meta or {}))

    @property
    def dim(self) -> int:
        return self.weights.size

    @property
    def row_sums(self) -> np.ndarray:
        if "_row_sums" not in self.meta:
            self.meta["_row_sums"] = _row_sums(self.matrix)
        return self.meta["_row_sums"]

    def apply_density(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ (self.weights * f)) / self.weights

    def apply_functional(self, nu: np.ndarray) -> np.ndarray:
        return self.matrix @ nu

    def pair(self, nu: np.ndarray, f: np.ndarray) -> float:
        """Duality pairing <nu, f> = sum nu_i f_i w_i."""
        return float(np.sum(nu * f * self.weights))


@dataclass
class SpectralTriple:
    lam: float
    phi: np.ndarray
    nu: np.ndarray
    residual: float
    meta: dict = field(default_factory=dict)


def leading_eigentriple(op: FiniteOperator, tol: float = 1e-12,
                        max_iter: int = 10 ** 6,
                        phi0: np.ndarray | None = None,
                        nu0: np.ndarray | None = None) -> SpectralTriple:
    """Dominant (lambda, phi, nu) by power iteration.

    ``phi`` is returned with Lebesgue mass 1 (``sum phi_i w_i = 1``) and
    ``nu`` scaled so that ``<nu, phi> = 1``.  Supplying a good ``phi0``
    (e.g. the known invariant density) makes convergence immediate.
    """
    w = op.weights
    phi = np.ones(op.dim) if phi0 is None else np.abs(np.asarray(phi0, dtype=float))
    mass = float(phi @ w)
    if mass <= 0.0:
        raise ValueError("starting vector carries no mass")
    phi = phi / mass

    lam = 0.0
    res = np.inf
    check_res = np.inf
    for it in range(max_iter):
        y = op.apply_density(phi)
        lam = float(y @ w)
        if lam <= 1e-300:
            # operator annihilates everything reachable: spectral radius 0
            return SpectralTriple(0.0, phi, np.zeros(op.dim),
                                  residual=float(np.abs(y) @ w),
                                  meta={"iterations": it, "nilpotent": True})
        res = float(np.abs(y - lam * phi) @ w)
        phi = y / lam
        if res <= tol:
            break
        if it % 20000 == 19999:
            if res > 0.999 * check_res:
                raise NonConvergence(f"right iteration stagnated at residual {res:.3e}")
            check_res = res
    else:
        raise NonConvergence(f"right residual {res:.3e} > tol after {max_iter} iterations")

    if float(phi.min()) < -1e3 * tol:
        raise SignError("converged eigenvector is not one-signed")

    nu = np.ones(op.dim) if nu0 is None else np.asarray(nu0, dtype=float).copy()
    nu = nu / np.abs(nu).max()
    res_l = np.inf
    check_res = np.inf
    for it2 in range(max_iter):
        z = op.apply_functional(nu)
        res_l = float(np.abs(z - lam * nu).max())
        top = np.abs(z).max()
        if top <= 1e-300:
            nu = np.zeros(op.dim)
            res_l = 0.0
            break
        nu = z / top
        if res_l <= tol * max(1.0, lam):
            break
        if it2 % 20000 == 19999:
            if res_l > 0.999 * check_res:
                raise NonConvergence(f"left iteration stagnated at residual {res_l:.3e}")
            check_res = res_l
    else:
        raise NonConvergence(f"left residual {res_l:.3e} > tol after {max_iter} iterations")

    phi = phi / float(phi @ w)
    pairing = op.pair(nu, phi)
    if abs(pairing) < 1e-300:
        raise SignError("left and right eigenvectors pair to zero")
    nu = nu / pairing
    return SpectralTriple(lam, phi, nu, residual=max(res, res_l / abs(pairing)),
                          meta={"iterations": it + 1, "left_iterations": it2 + 1})


def subleading_eigenvalue(op: FiniteOperator, deflate: SpectralTriple,
                          tol: float = 1e-10, max_iter: int = 10 ** 6,
                          v0: np.ndarray | None = None) -> float:
    """Dominant eigenvalue on the zero-mean subspace of a stochastic operator.

    Power iteration on ``{f : sum f_i w_i = 0}``, re-projected every step with
    ``f -> f - (sum f_i w_i) phi``.  Raises DegenerateGap when the iteration
    stalls, which is the signature of a complex pair or a near-tie with the
    next eigenvalue.
    """
    if not op.stochastic:
        raise ValueError("subleading extraction expects a stochastic operator")
    w = op.weights
    phi = deflate.phi / float(deflate.phi @ w)

    if v0 is None:
        rng = np.random.default_rng(0)
        v = rng.standard_normal(op.dim)
    else:
        v = np.asarray(v0, dtype=float).copy()
    v = v - float(v @ w) * phi
    nrm = float(np.abs(v) @ w)
    if nrm <= 0.0:
        raise ValueError("starting vector lies in the deflated direction")
    v = v / nrm

    lam = 0.0
    res = np.inf
    window: list[float] = []
    for it in range(max_iter):
        y = op.apply_density(v)
        y = y - float(y @ w) * phi
        den = float((v * v) @ w)
        lam = float((v * y) @ w) / den
        res = float(np.abs(y - lam * v) @ w)
        if res <= tol:
            return lam
        nrm = float(np.abs(y) @ w)
        if nrm <= 1e-300:
            return 0.0
        v = y / nrm
        if it % 500 == 499:
            window.append(res)
            if len(window) >= 5 and window[-1] > 0.95 * window[-5]:
                raise DegenerateGap(
                    f"residual stalled at {res:.3e}; second eigenvalue appears "
                    "complex or degenerate with the next one")
    raise NonConvergence(f"subleading residual {res:.3e} > tol after {max_iter} iterations")


def dense_spectrum_oracle(op: FiniteOperator) -> np.ndarray:
    """Full spectrum by dense decomposition, sorted by modulus (descending)."""
    if op.dim > 512:
        raise DimTooLarge(f"dense oracle limited to dim 512, got {op.dim}")
    mat = op.matrix.toarray() if sp.issparse(op.matrix) else np.asarray(op.matrix)
    vals = np.linalg.eigvals(mat)
    return vals[np.argsort(-np.abs(vals))]


def dominant_from_dense(op: FiniteOperator, imag_tol: float = 1e-9) -> float:
    """Largest-modulus eigenvalue from the dense oracle, checked to be real."""
    top = dense_spectrum_oracle(op)[0]
    if abs(top.imag) > imag_tol * max(1.0, abs(top)):
        raise DegenerateGap(f"dominant eigenvalue is not real: {top}")
    return float(top.real)
