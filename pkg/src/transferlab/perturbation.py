"""First-order response of leading eigenvalues under operator perturbations.

For a family P_eps with base triple (lambda0, phi0, nu0) the relevant
quantities are

    delta(eps) = <nu0, (P0 - P_eps) phi0>
    eta(eps)   = dual norm of the functional nu0 (P0 - P_eps)
    q_k(eps)   = <nu0 (P0 - P_eps), P_eps^k (P0 - P_eps) phi0> / delta(eps)

and the limiting eigenvalue ratio (lambda0 - lambda_eps) / delta(eps) equals
1 - sum_k lambda0^-(k+1) q_k.  ``verify_response`` measures both sides on a
geometric epsilon ladder and reports them.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .spectral import (DimensionMismatch, FiniteOperator, SpectralTriple,
                       dominant_from_dense, leading_eigentriple)

ZERO_DELTA = 1e-14


class ZeroDelta(ValueError):
    """delta(eps) vanishes; the q-sequence is undefined."""


@dataclass
class PerturbationFamily:
    """Base operator, accessor eps -> operator, and a decreasing eps grid."""

    p0: FiniteOperator
    p_at: Callable[[float], FiniteOperator]
    eps_grid: np.ndarray
    triple0: SpectralTriple | None = None
    solver_tol: float = 1e-12
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eps_grid = np.asarray(self.eps_grid, dtype=float)
        if np.any(np.diff(self.eps_grid) >= 0.0) or np.any(self.eps_grid <= 0.0):
            raise ValueError("eps grid must be positive and strictly decreasing")

    def base_triple(self) -> SpectralTriple:
        if self.triple0 is None:
            self.triple0 = leading_eigentriple(self.p0, tol=self.solver_tol)
        return self.triple0

    def check_consistency(self):
        """p_at(0) must reproduce p0 and all members must share the partition."""
        z = self.p_at(0.0)
        if z.dim != self.p0.dim:
            raise DimensionMismatch("p_at(0) has a different dimension than p0")
        diff = z.matrix - self.p0.matrix
        if sp.issparse(diff):
            gap = float(np.abs(diff.data).max()) if diff.nnz else 0.0
        else:
            gap = float(np.abs(diff).max()) if np.size(diff) else 0.0
        if gap > 1e-13:
            raise ValueError(f"p_at(0) differs from p0 by {gap:.3e}")
        if np.abs(self.p_at(self.eps_grid[0]).weights - self.p0.weights).max() > 1e-15:
            raise ValueError("family members do not share cell weights")


def _difference_on_density(fam: PerturbationFamily, pe: FiniteOperator,
                           f: np.ndarray) -> np.ndarray:
    return fam.p0.apply_density(f) - pe.apply_density(f)


def _difference_functional(fam: PerturbationFamily, pe: FiniteOperator) -> np.ndarray:
    tri = fam.base_triple()
    return fam.p0.apply_functional(tri.nu) - pe.apply_functional(tri.nu)


def delta_eps(fam: PerturbationFamily, eps: float) -> float:
    """<nu0, (P0 - P_eps) phi0> with the discrete weighted pairing."""
    tri = fam.base_triple()
    pe = fam.p0 if eps == 0.0 else fam.p_at(eps)
    if pe.dim != fam.p0.dim:
        raise DimensionMismatch("family member dimension changed")
    g = _difference_on_density(fam, pe, tri.phi)
    return fam.p0.pair(tri.nu, g)


def eta_eps(fam: PerturbationFamily, eps: float) -> float:
    """Dual norm of nu0 (P0 - P_eps) over sup-norm-1 densities: sum_i |c_i| w_i.

    The norm choice only gates hypotheses and diagnostics; the eigenvalue
    ratio itself is norm-independent.
    """
    pe = fam.p0 if eps == 0.0 else fam.p_at(eps)
    if pe.dim != fam.p0.dim:
        raise DimensionMismatch("family member dimension changed")
    c = _difference_functional(fam, pe)
    return float(np.abs(c) @ fam.p0.weights)


def q_sequence(fam: PerturbationFamily, eps: float, k_max: int) -> np.ndarray:
    """q_0 .. q_kmax at a fixed eps, by iterated application of P_eps."""
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    delta = delta_eps(fam, eps)
    if abs(delta) < ZERO_DELTA:
        raise ZeroDelta(f"delta({eps}) = {delta:.3e} is below {ZERO_DELTA}")
    tri = fam.base_triple()
    pe = fam.p_at(eps)
    w = fam.p0.weights
    v = _difference_on_density(fam, pe, tri.phi)
    c = _difference_functional(fam, pe)
    out = np.empty(k_max + 1)
    for k in range(k_max + 1):
        out[k] = float(np.sum(c * v * w)) / delta
        if k < k_max:
            v = pe.apply_density(v)
    return out


@dataclass(frozen=True)
class SeriesValue:
    value: float
    last_term: float   # magnitude of the final retained term (truncation gauge)


def response_series(lambda0: float, qk) -> SeriesValue:
    """1 - sum_k lambda0^-(k+1) q_k over the supplied (truncated) q list."""
    if lambda0 == 0.0:
        raise ValueError("lambda0 must be nonzero")
    qk = np.asarray(qk, dtype=float)
    if qk.size == 0:
        return SeriesValue(1.0, 0.0)
    powers = lambda0 ** (-(np.arange(qk.size) + 1.0))
    terms = powers * qk
    return SeriesValue(float(1.0 - terms.sum()), float(abs(terms[-1])))


@dataclass
class ResponseReport:
    per_eps: list
    qk: list
    series_value: float | None
    series_last_term: float | None
    extrapolated_ratio: float | None
    branch: str                      # 'response' or 'zero-delta'
    passed: bool
    tolerance: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "perEps": self.per_eps,
            "qk": self.qk,
            "seriesValue": self.series_value,
            "seriesLastTerm": self.series_last_term,
            "extrapolatedRatio": self.extrapolated_ratio,
            "branch": self.branch,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["eps", "lambda", "delta", "eta", "ratio", "identity_residual"]
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for rec in self.per_eps:
            writer.writerow({k: format(rec[k], ".17g") if rec.get(k) is not None else ""
                             for k in fields})
        return buf.getvalue()


def richardson(eps_small: float, r_small: float, eps_big: float, r_big: float) -> float:
    """First-order eliminant through the two smallest ladder points."""
    return (r_small * eps_big - r_big * eps_small) / (eps_big - eps_small)


def verify_response(fam: PerturbationFamily, k_max: int = 40,
                    tolerance: float = 1e-4, eig: str = "power",
                    tol: float = 1e-12) -> ResponseReport:
    """Measure (lambda0 - lambda_eps)/delta(eps) along the ladder and compare
    its Richardson extrapolation with the truncated response series.

    With eig='dense' the eigenvalues come from the dense oracle (exact up to
    LAPACK), which is the reference mode for small random families.
    """
    grid = fam.eps_grid
    if grid.size < 4:
        raise ValueError("need at least 4 ladder points")
    if np.any(grid[1:] / grid[:-1] > 0.5 + 1e-9):
        raise ValueError("ladder must decrease geometrically with ratio <= 1/2")
    if eig not in ("power", "dense"):
        raise ValueError("eig must be 'power' or 'dense'")
    fam.check_consistency()
    tri = fam.base_triple()
    lam0 = tri.lam
    w = fam.p0.weights

    per_eps = []
    deltas = []
    for eps in grid:
        pe = fam.p_at(eps)
        rec = {"eps": float(eps)}
        if eig == "dense":
            lam = dominant_from_dense(pe)
            rec["identity_residual"] = None
        else:
            tri_e = leading_eigentriple(pe, tol=tol)
            lam = tri_e.lam
            # eigenvalue difference identity: lambda0 - lambda_eps equals
            # <nu0, (P0 - P_eps) phi_eps> once nu0(phi_eps) = 1
            phi_e = tri_e.phi / fam.p0.pair(tri.nu, tri_e.phi)
            lhs = lam0 - lam
            rhs = fam.p0.pair(tri.nu, _difference_on_density(fam, pe, phi_e))
            rec["identity_residual"] = abs(lhs - rhs)
        d = delta_eps(fam, eps)
        rec["lambda"] = float(lam)
        rec["delta"] = float(d)
        rec["eta"] = eta_eps(fam, eps)
        rec["ratio"] = (lam0 - lam) / d if abs(d) >= ZERO_DELTA else None
        per_eps.append(rec)
        deltas.append(d)

    meta = {"lambda0": lam0, "eig": eig, "k_max": k_max, "solver_tol": tol,
            "eta_norm": "sum_i |c_i| w_i (dual of the sup norm on densities)"}

    if all(abs(d) < ZERO_DELTA for d in deltas):
        worst = max(abs(rec["lambda"] - lam0) for rec in per_eps)
        passed = worst <= 10.0 * max(tol, 1e-15)
        meta["max_lambda_shift"] = worst
        return ResponseReport(per_eps, [], None, None, None, "zero-delta",
                              passed, tolerance, meta)

    if any(abs(d) < ZERO_DELTA for d in deltas[-2:]):
        raise ZeroDelta("smallest ladder points have vanishing delta")
    r_small = per_eps[-1]["ratio"]
    r_big = per_eps[-2]["ratio"]
    extrapolated = richardson(grid[-1], r_small, grid[-2], r_big)
    qk = q_sequence(fam, float(grid[-1]), k_max)
    series = response_series(lam0, qk)
    passed = abs(extrapolated - series.value) <= tolerance
    meta["series_minus_extrapolated"] = series.value - extrapolated
    return ResponseReport(per_eps, [float(q) for q in qk], series.value,
                          series.last_term, float(extrapolated), "response",
                          passed, tolerance, meta)


# ---------------------------------------------------------------------------
# seeded random families (reference workloads for the response theorem)
# ---------------------------------------------------------------------------

def random_family(seed: int, dim: int | None = None, kind: str = "generic",
                  eps_max: float = 1e-3, eps_count: int = 13,
                  gap: float = 0.8) -> PerturbationFamily:
    """Random substochastic family P_eps = P0 - eps G with a guaranteed gap.

    P0 = s (c 1 x pi + (1-c) R) has dominant eigenvalue s and the rest of the
    spectrum inside radius s (1-c).  Kinds: 'generic' (G >= 0 supported on
    P0), 'zero-nu' (nu0 G = 0 so delta vanishes while entries still move),
    'zero-phi' (G phi0 = 0, same conclusion through the right vector).
    """
    rng = np.random.default_rng(seed)
    if dim is None:
        dim = int(rng.integers(16, 129))
    w = 0.5 + rng.random(dim)
    w = w / w.sum()
    r = rng.random((dim, dim)) + 0.05
    r = r / r.sum(axis=1, keepdims=True)
    pi = rng.random(dim) + 0.05
    pi = pi / pi.sum()
    s = 0.9 + 0.1 * rng.random()
    p0m = s * (gap * np.outer(np.ones(dim), pi) + (1.0 - gap) * r)
    p0 = FiniteOperator.from_matrix(p0m, w)
    tri0 = leading_eigentriple(p0, tol=1e-13)

    if kind == "generic":
        mask = rng.random((dim, dim)) < 0.5
        if not mask.any():
            mask[0, 0] = True
        g = p0m * mask * 0.5
    elif kind == "zero-nu":
        a = rng.standard_normal((dim, dim))
        scale_rows = (a @ tri0.nu) / (p0m @ tri0.nu)
        g = a - p0m * scale_rows[:, None]
    elif kind == "zero-phi":
        a = rng.standard_normal((dim, dim))
        wphi = w * tri0.phi
        scale_cols = (wphi @ a) / (wphi @ p0m)
        g = a - p0m * scale_cols[None, :]
    else:
        raise ValueError(f"unknown family kind {kind!r}")

    if kind != "generic":
        pos = g > 0.0
        if pos.any():
            cap = np.min(p0m[pos] / g[pos]) / eps_max
            g = g * min(1.0, 0.5 * cap)

    grid = eps_max * 0.5 ** np.arange(eps_count)
    fam = PerturbationFamily(
        p0=p0,
        p_at=lambda e: FiniteOperator.from_matrix(p0m - e * g, w) if e > 0.0 else p0,
        eps_grid=grid,
        triple0=tri0,
        meta={"seed": seed, "dim": dim, "kind": kind, "s": s},
    )
    return fam
