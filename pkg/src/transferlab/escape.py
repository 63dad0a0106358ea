"""Escape-rate experiments: eigenvalue curves over shrinking holes and the
slope of 1 - lambda_eps at eps = 0, compared with closed-form predictions.

Slopes are extracted two ways: a first-order Richardson eliminant on the two
smallest ladder points (with a regression cross-check), and the response
series 1 - sum lambda0^-(k+1) q_k evaluated from the matrices themselves.
On exactly-representable fixtures (dyadic holes for the doubling map) the
series route is exact to rounding, because every q_k below the cylinder
depth is an exact cell-measure ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .intervalmaps import GOLDEN, LN2, PeriodicPoint, PiecewiseMap, builtin, golden_epsilon_k
from .perturbation import PerturbationFamily, q_sequence, response_series
from .spectral import FiniteOperator, SpectralTriple, leading_eigentriple
from .ulam import (HoleSpec, Partition1D, build_ulam_1d, build_ulam_2d,
                   mask_strip, refine_for_hole)
from . import ulam


class Inconsistent(RuntimeError):
    """Richardson and regression slope estimates disagree beyond tolerance."""


@dataclass
class SlopeEstimate:
    value: float
    method: str
    diagnostics: dict = field(default_factory=dict)


@dataclass
class EscapeExperiment:
    pmap: PiecewiseMap
    hole_family: Callable[[float], HoleSpec]
    eps_ladder: np.ndarray
    grid_size: int
    prediction: float | None = None
    solver_tol: float = 1e-13

    def __post_init__(self):
        self.eps_ladder = np.asarray(self.eps_ladder, dtype=float)
        if np.any(np.diff(self.eps_ladder) >= 0.0):
            raise ValueError("eps ladder must be strictly decreasing")


@dataclass
class EscapeCurve:
    records: list
    part: Partition1D
    op0: FiniteOperator
    triple0: SpectralTriple
    experiment: EscapeExperiment

    @property
    def eps(self) -> np.ndarray:
        return np.array([r["eps"] for r in self.records])

    @property
    def lams(self) -> np.ndarray:
        return np.array([r["lambda"] for r in self.records])


def escape_curve(exp: EscapeExperiment) -> EscapeCurve:
    """Leading eigenvalue along the hole ladder on a single refined partition.

    Hole endpoints are inserted as partition nodes so every masked operator
    is an exact restriction (no partial-cell mask bias on the ladder).
    """
    holes = [exp.hole_family(e) for e in exp.eps_ladder]
    for big, small in zip(holes[:-1], holes[1:]):
        if not big.covers(small):
            raise ValueError("hole family is not nested along the ladder")
    part = Partition1D.uniform(exp.grid_size)
    for h in holes:
        part = refine_for_hole(part, h)
    op0 = build_ulam_1d(exp.pmap, part)
    triple0 = leading_eigentriple(op0, tol=exp.solver_tol,
                                  phi0=None if exp.pmap.known_density is None
                                  else exp.pmap.known_density(
                                      0.5 * (part.nodes[:-1] + part.nodes[1:])))
    records = []
    prev_lam = None
    for eps, hole in zip(exp.eps_ladder, holes):
        masked = ulam.mask_hole(op0, part, hole)
        tri = leading_eigentriple(masked, tol=exp.solver_tol, phi0=triple0.phi)
        phi_n = tri.phi / op0.pair(triple0.nu, tri.phi)
        diff = op0.apply_density(phi_n) - masked.apply_density(phi_n)
        identity_residual = abs((triple0.lam - tri.lam) - op0.pair(triple0.nu, diff))
        if prev_lam is not None and tri.lam > prev_lam + 1e-10:
            raise AssertionError("lambda increased along a nested hole ladder")
        prev_lam = tri.lam
        records.append({
            "eps": float(eps),
            "lambda": float(tri.lam),
            "hole_measure": hole.measure,
            "phi_min": float(tri.phi.min()),
            "phi_max": float(tri.phi.max()),
            "identity_residual": float(identity_residual),
            "solver_residual": float(tri.residual),
        })
    # holes shrink along the ladder, so lambda was checked nonincreasing in eps
    records.sort(key=lambda r: r["eps"], reverse=True)
    return EscapeCurve(records, part, op0, triple0, exp)


def slope_at_zero(eps_values, lambda_values, lam0: float = 1.0,
                  denominators=None) -> SlopeEstimate:
    """lim (lam0 - lambda_eps) / eps by Richardson, regression as cross-check."""
    eps = np.asarray(eps_values, dtype=float)
    lams = np.asarray(lambda_values, dtype=float)
    if eps.size < 4:
        raise ValueError("need at least 4 ladder points")
    order = np.argsort(eps)
    eps, lams = eps[order], lams[order]
    x = np.asarray(denominators, dtype=float)[order] if denominators is not None else eps
    r = (lam0 - lams) / x

    rich = (r[0] * eps[1] - r[1] * eps[0]) / (eps[1] - eps[0])
    k = min(4, eps.size)
    coeffs, cov = np.polyfit(eps[:k], r[:k], 1, cov=True)
    intercept = float(coeffs[1])
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    fit = np.polyval(coeffs, eps[:k])
    if abs(rich - intercept) > max(5.0 * se, 1e-10 * max(1.0, abs(rich))):
        raise Inconsistent(
            f"richardson {rich:.6g} vs regression {intercept:.6g} (se {se:.2g})")
    return SlopeEstimate(float(rich), "richardson", {
        "regression_intercept": intercept,
        "regression_se": se,
        "regression_residuals": (r[:k] - fit).tolist(),
        "ratios": r.tolist(),
        "eps": eps.tolist(),
    })


def response_series_slope(curve: EscapeCurve, k_max: int = 40,
                          eps: float | None = None) -> tuple[float, float]:
    """Slope through the response series at the smallest (or given) ladder eps.

    Returns (value, last_term_magnitude).  The series is taken per unit of
    the discrete pairing delta(eps), then rescaled to per unit hole measure.
    """
    exp = curve.experiment
    e = float(curve.eps.min() if eps is None else eps)
    fam = PerturbationFamily(
        p0=curve.op0,
        p_at=lambda t: ulam.mask_hole(curve.op0, curve.part, exp.hole_family(t))
        if t > 0.0 else curve.op0,
        eps_grid=exp.eps_ladder,
        triple0=curve.triple0,
    )
    from .perturbation import delta_eps as _delta
    qk = q_sequence(fam, e, k_max)
    series = response_series(curve.triple0.lam, qk)
    delta = _delta(fam, e)
    measure = exp.hole_family(e).measure
    return series.value * delta / measure, series.last_term


def predicted_slope(pmap: PiecewiseMap, z, density: Callable | None = None) -> float:
    """First-order escape slope per unit hole length at the point z.

    Periodic z of period p with multiplier M: phi0(z) (1 - 1/M); any other
    continuity point: phi0(z).
    """
    dens = density if density is not None else pmap.known_density
    if dens is None:
        raise ValueError("no invariant density available for the prediction")
    if isinstance(z, PeriodicPoint):
        return float(dens(z.z)) * (1.0 - 1.0 / z.multiplier)
    return float(dens(float(z)))


# ---------------------------------------------------------------------------
# named experiments
# ---------------------------------------------------------------------------

def doubling_periodic_hole_family(period: int, max_depth: int) -> Callable[[float], HoleSpec]:
    """Nested dyadic cylinder holes around the periodic point with itinerary
    0^(period-1) 1 (i.e. z = 1/(2^p - 1)); eps must be a power of 1/2."""
    z = 1.0 / (2 ** period - 1)

    def family(eps: float) -> HoleSpec:
        depth = int(round(-math.log2(eps)))
        if abs(eps - 2.0 ** -depth) > 1e-15 or depth > max_depth:
            raise ValueError(f"eps {eps} is not a representable dyadic cylinder")
        lo = math.floor(z * 2 ** depth) / 2 ** depth
        return HoleSpec.interval(lo, lo + eps)

    return family


def doubling_exact_experiment(period: int, grid_log2: int = 12,
                              depths=range(5, 11)) -> dict:
    """Machine-exact doubling fixture: dyadic cylinder holes at a periodic point.

    The response-series slope equals 1 - 2^-p to rounding; the Richardson
    slope carries the genuine o(eps) corrections and serves as cross-check.
    """
    pmap = builtin("doubling")
    ladder = np.array([2.0 ** -d for d in depths])
    exp = EscapeExperiment(pmap, doubling_periodic_hole_family(period, grid_log2),
                           ladder, grid_size=2 ** grid_log2)
    curve = escape_curve(exp)
    series_value, tail = response_series_slope(curve, k_max=min(8, grid_log2 - 3))
    slope = slope_at_zero(curve.eps, curve.lams, lam0=curve.triple0.lam)
    target = 1.0 - 2.0 ** -period
    return {
        "period": period,
        "target": target,
        "series_slope": series_value,
        "series_tail": tail,
        "richardson_slope": slope.value,
        "curve": curve,
        "slope": slope,
    }


def gauss_origin_experiment(grid_size: int = 8192,
                            ladder=None, n_max: int | None = None) -> dict:
    """Gauss map with holes [0, eps]: slope tends to 1/ln 2.

    Branches with index beyond 1/eps_min never act outside the hole, so the
    truncated matrices agree exactly with the untruncated ones on the ladder;
    the base eigenvalue is the analytic lambda0 = 1.
    """
    ladder = np.array([2.0 ** -k for k in range(4, 10)]) if ladder is None \
        else np.asarray(ladder, dtype=float)
    if n_max is None:
        n_max = int(math.ceil(1.0 / ladder.min()))
    if 1.0 / (n_max + 1) > ladder.min():
        raise ValueError("branch truncation leaks outside the smallest hole")
    pmap = builtin("gauss", n_max=n_max)
    exp = EscapeExperiment(pmap, lambda e: HoleSpec.interval(0.0, e), ladder,
                           grid_size=grid_size)
    curve = escape_curve(exp)
    slope = slope_at_zero(curve.eps, curve.lams, lam0=1.0)
    return {
        "target": 1.0 / LN2,
        "slope": slope,
        "curve": curve,
        "relative_error": abs(slope.value - 1.0 / LN2) * LN2,
    }


def gauss_golden_experiment(grid_size: int = 8192, ladder=None,
                            n_max: int = 1024) -> dict:
    """Gauss map with holes centered at the golden-mean fixed point.

    The hole sits away from the truncated branches, so their (small) leak is
    shared by every ladder member; measuring against the matrix lambda0
    removes it to first order.
    """
    z = GOLDEN
    ladder = np.array([2.0 ** -k for k in range(5, 11)]) if ladder is None \
        else np.asarray(ladder, dtype=float)
    pmap = builtin("gauss", n_max=n_max)
    exp = EscapeExperiment(pmap,
                           lambda e: HoleSpec.interval(z - e / 2.0, z + e / 2.0),
                           ladder, grid_size=grid_size)
    curve = escape_curve(exp)
    slope = slope_at_zero(curve.eps, curve.lams, lam0=curve.triple0.lam)
    target = z * z / LN2
    return {
        "target": target,
        "slope": slope,
        "curve": curve,
        "relative_error": abs(slope.value - target) / target,
    }


def golden_block_experiment(k_range=range(2, 6), grid_size: int = 16384,
                            n_max: int = 1024) -> dict:
    """Continued-fraction block holes: (1 - lambda_k) / z^{2k} -> z^3 (1+z^2)^2 / ln 2."""
    z = GOLDEN
    holes = {k: golden_epsilon_k(k) for k in k_range}
    pmap = builtin("gauss", n_max=n_max)
    part = Partition1D.uniform(grid_size)
    for h in holes.values():
        part = part.insert([h.left_float, h.right_float])
    op0 = build_ulam_1d(pmap, part)
    mids = 0.5 * (part.nodes[:-1] + part.nodes[1:])
    triple0 = leading_eigentriple(op0, tol=1e-13, phi0=pmap.known_density(mids))
    target = z ** 3 * (1.0 + z * z) ** 2 / LN2
    records = []
    cell_w = part.weights.max()
    for k in sorted(holes):
        h = holes[k]
        masked = ulam.mask_hole(op0, part, HoleSpec.interval(h.left_float, h.right_float))
        tri = leading_eigentriple(masked, tol=1e-13, phi0=triple0.phi)
        records.append({
            "k": k,
            "eps": h.eps_float,
            "lambda": tri.lam,
            "ratio": (triple0.lam - tri.lam) / z ** (2 * k),
            "grid_limited": h.eps_float < 4.0 * cell_w,
        })
    return {"target": target, "records": records, "triple0": triple0}


def cusp_exponent(gamma: float, ladder=None, grid_size: int = 8192) -> dict:
    """Log-log exponent of 1 - lambda_eps for cusp holes [1-eps, 1].

    The invariant density vanishes at 1 like (1-x)^(1/gamma - 1), which turns
    the usual linear law into eps^(1/gamma); the prefactor estimates the
    density value at the critical point 1/2.
    """
    if not 0.6 < gamma <= 1.0:
        raise ValueError("exponent extraction is calibrated for gamma in (0.6, 1]")
    ladder = np.array([2.0 ** -k for k in range(4, 10)]) if ladder is None \
        else np.asarray(ladder, dtype=float)
    pmap = builtin("cusp", gamma=gamma) if gamma < 1.0 else builtin("tent")
    exp = EscapeExperiment(pmap, lambda e: HoleSpec.interval(1.0 - e, 1.0),
                           ladder, grid_size=grid_size)
    curve = escape_curve(exp)
    drops = curve.triple0.lam - curve.lams
    coeffs = np.polyfit(np.log(curve.eps), np.log(drops), 1)
    exponent = float(coeffs[0])
    prefactor = float(math.exp(coeffs[1]))
    mid_cell = curve.part.cell_of(0.5)
    phi_half = float(0.5 * (curve.triple0.phi[mid_cell - 1] + curve.triple0.phi[mid_cell]))
    return {
        "gamma": gamma,
        "exponent": exponent,
        "target_exponent": 1.0 / gamma,
        "prefactor": prefactor,
        "phi_at_half": phi_half,
        "curve": curve,
    }


def staircase_diagnostic(pmap: PiecewiseMap, base_hole: HoleSpec, eps_ladder,
                         grid_size: int = 4096) -> dict:
    """Grow a nontrivial hole and trace the quasi-stationary mass it swallows.

    Only monotonicity of the swallowed mass is asserted; the mass curve is
    typically a staircase and the eigenvalue need not be differentiable.
    """
    eps_ladder = np.asarray(eps_ladder, dtype=float)
    a = base_hole.intervals[0][0]
    holes = [HoleSpec.interval(a - e, base_hole.intervals[0][1]) for e in eps_ladder]
    part = Partition1D.uniform(grid_size)
    part = refine_for_hole(part, base_hole)
    for h in holes:
        part = refine_for_hole(part, h)
    op0 = build_ulam_1d(pmap, part)
    base_masked = ulam.mask_hole(op0, part, base_hole)
    tri0 = leading_eigentriple(base_masked, tol=1e-12)
    mu = tri0.phi * tri0.nu * part.weights   # quasi-stationary measure, mass 1
    records = []
    for eps, hole in zip(eps_ladder, holes):
        sliver = ulam._overlap_lengths(a - eps, a, part.nodes) / part.weights
        mass = float(np.sum(mu * sliver))
        masked = ulam.mask_hole(op0, part, hole)
        tri = leading_eigentriple(masked, tol=1e-12)
        records.append({"eps": float(eps), "mu_mass": mass, "lambda": tri.lam})
    rec_sorted = sorted(records, key=lambda r: r["eps"])
    masses = [r["mu_mass"] for r in rec_sorted]
    if np.any(np.diff(masses) < -1e-12):
        raise AssertionError("quasi-stationary mass decreased for a growing hole")
    return {"records": rec_sorted, "lambda0": tri0.lam, "triple0": tri0,
            "part": part, "op0": op0}


def coupled_sync_experiment(delta: float, eps_ladder, n: int,
                            map_slope: int = 5) -> dict:
    """Synchronization of two coupled expanding maps through the strip hole.

    Measures (1 - lambda_eps)/(2 eps) and compares with the diagonal-density
    integral int h(x,x) (1 - 1/((1 - 2 delta) |T'|)) dx, the diagonal values
    taken as the mean of the two adjacent cell layers.
    """
    eps_ladder = np.asarray(eps_ladder, dtype=float)
    if eps_ladder.size and eps_ladder.min() <= 0.0:
        raise ValueError("strip experiment needs positive eps values")
    pmap = builtin("linear_mod1", k=map_slope)
    op = build_ulam_2d(pmap, delta, n)
    if delta == 0.0:
        hdiag = np.ones(n - 1)
        lam0 = 1.0
        tri = None
    else:
        tri = leading_eigentriple(op, tol=1e-12)
        lam0 = tri.lam
        grid_h = tri.phi.reshape(n, n)
        hdiag = 0.5 * (np.diagonal(grid_h, offset=1) + np.diagonal(grid_h, offset=-1))
    slope_factor = 1.0 - 1.0 / ((1.0 - 2.0 * delta) * map_slope)
    prediction = float(np.mean(hdiag) * slope_factor)
    records = []
    for eps in eps_ladder:
        masked = mask_strip(op, n, float(eps))
        tri_e = leading_eigentriple(masked, tol=1e-12,
                                    phi0=None if tri is None else tri.phi)
        records.append({"eps": float(eps), "lambda": tri_e.lam})
    eps = np.array([r["eps"] for r in records])
    lams = np.array([r["lambda"] for r in records])
    slope = slope_at_zero(eps, lams, lam0=lam0, denominators=2.0 * eps)
    return {
        "delta": delta,
        "prediction": prediction,
        "slope": slope,
        "records": records,
        "relative_error": abs(slope.value - prediction) / abs(prediction),
    }
