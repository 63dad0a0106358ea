"""Piecewise expanding interval maps with analytic branch inverses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LN2 = math.log(2.0)


class BadParam(ValueError):
    pass


class NoContraction(RuntimeError):
    pass


class NotInDomain(RuntimeError):
    pass


@dataclass(frozen=True)
class Branch:
    """One monotone branch: forward map, analytic inverse and |T'|.

    ``slope`` is set for affine branches (signed) and None otherwise; the 2D
    coupled builder relies on it.
    """

    lo: float
    hi: float
    forward: Callable
    inverse: Callable
    deriv_abs: Callable
    increasing: bool
    y_lo: float
    y_hi: float
    slope: float | None = None


@dataclass(frozen=True)
class PiecewiseMap:
    name: str
    branches: tuple
    known_density: Callable | None = None
    params: dict = field(default_factory=dict)
    dropped_mass: float = 0.0  # domain mass of truncated branches (Gauss)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def branch_of(self, x: float) -> int:
        for idx, br in enumerate(self.branches):
            hi_ok = x <= br.hi if idx == len(self.branches) - 1 else x < br.hi
            if br.lo <= x and hi_ok:
                return idx
        raise NotInDomain(f"{x} not covered by the branches of {self.name}")

    def apply(self, x: float) -> float:
        return float(self.branches[self.branch_of(x)].forward(x))


@dataclass(frozen=True)
class PeriodicPoint:
    z: float
    period: int
    multiplier: float


@dataclass(frozen=True)
class GoldenHole:
    """Interval mapped onto (0,1) by k steps of the rightmost Gauss branch."""

    k: int
    left: Fraction
    right: Fraction
    eps: Fraction

    @property
    def left_float(self) -> float:
        return float(self.left)

    @property
    def right_float(self) -> float:
        return float(self.right)

    @property
    def eps_float(self) -> float:
        return float(self.eps)


def _affine_branch(d_lo, d_hi, i_lo, i_hi) -> Branch:
    slope = (i_hi - i_lo) / (d_hi - d_lo)
    if abs(slope) <= 1.0:
        raise BadParam(f"branch on [{d_lo}, {d_hi}] is not expanding (slope {slope})")
    inc = slope > 0
    fwd = lambda x, a=d_lo, b=i_lo, s=slope: b + s * (np.asarray(x) - a)
    inv = lambda y, a=d_lo, b=i_lo, s=slope: a + (np.asarray(y) - b) / s
    der = lambda x, s=abs(slope): np.full_like(np.asarray(x, dtype=float), s)
    ylo, yhi = (i_lo, i_hi) if inc else (i_hi, i_lo)
    return Branch(d_lo, d_hi, fwd, inv, der, inc, ylo, yhi, slope=slope)


def affine_map_from_spec(spec, name="custom") -> PiecewiseMap:
    """Piecewise-linear map from a list of {domainLeft, domainRight, imageLeft, imageRight}."""
    spec = sorted(spec, key=lambda b: b["domainLeft"])
    branches = []
    cursor = 0.0
    for b in spec:
        dl, dr = float(b["domainLeft"]), float(b["domainRight"])
        if abs(dl - cursor) > 1e-12:
            raise BadParam(f"branch domains leave a gap at {cursor}")
        branches.append(_affine_branch(dl, dr, float(b["imageLeft"]), float(b["imageRight"])))
        cursor = dr
    if abs(cursor - 1.0) > 1e-12:
        raise BadParam("branch domains do not cover [0, 1]")
    return PiecewiseMap(name, tuple(branches))


def load_affine_map(path_or_text, name="custom") -> PiecewiseMap:
    """Load the JSON form of an affine map spec (path or literal JSON text)."""
    text = path_or_text
    try:
        with open(path_or_text) as fh:
            text = fh.read()
    except (OSError, TypeError):
        pass
    return affine_map_from_spec(json.loads(text), name=name)


def _doubling() -> PiecewiseMap:
    spec = [dict(domainLeft=0.0, domainRight=0.5, imageLeft=0.0, imageRight=1.0),
            dict(domainLeft=0.5, domainRight=1.0, imageLeft=0.0, imageRight=1.0)]
    m = affine_map_from_spec(spec, name="doubling")
    return PiecewiseMap(m.name, m.branches, known_density=lambda x: np.ones_like(np.asarray(x, dtype=float)))


def _linear_mod1(k: int) -> PiecewiseMap:
    if k < 2:
        raise BadParam("linear_mod1 needs k >= 2")
    spec = [dict(domainLeft=j / k, domainRight=(j + 1) / k, imageLeft=0.0, imageRight=1.0)
            for j in range(k)]
    m = affine_map_from_spec(spec, name=f"linear_mod1({k})")
    return PiecewiseMap(m.name, m.branches, params={"k": k},
                        known_density=lambda x: np.ones_like(np.asarray(x, dtype=float)))


def _tent() -> PiecewiseMap:
    spec = [dict(domainLeft=0.0, domainRight=0.5, imageLeft=0.0, imageRight=1.0),
            dict(domainLeft=0.5, domainRight=1.0, imageLeft=1.0, imageRight=0.0)]
    m = affine_map_from_spec(spec, name="tent")
    return PiecewiseMap(m.name, m.branches, known_density=lambda x: np.ones_like(np.asarray(x, dtype=float)))


def _gauss(n_max: int) -> PiecewiseMap:
    if n_max < 2:
        raise BadParam("gauss needs n_max >= 2")
    branches = []
    for n in range(1, n_max + 1):
        fwd = lambda x, n=n: 1.0 / np.asarray(x) - n
        inv = lambda y, n=n: 1.0 / (np.asarray(y) + n)
        der = lambda x: 1.0 / np.asarray(x) ** 2
        branches.append(Branch(1.0 / (n + 1), 1.0 / n, fwd, inv, der,
                               increasing=False, y_lo=0.0, y_hi=1.0))
    dens = lambda x: 1.0 / ((1.0 + np.asarray(x, dtype=float)) * LN2)
    return PiecewiseMap(f"gauss({n_max})", tuple(branches), known_density=dens,
                        params={"n_max": n_max}, dropped_mass=1.0 / (n_max + 1))


def _cusp(gamma: float) -> PiecewiseMap:
    if not 0.5 < gamma <= 1.0:
        raise BadParam("cusp exponent must lie in (1/2, 1]")
    g = float(gamma)
    left = Branch(0.0, 0.5,
                  forward=lambda x: 1.0 - (1.0 - 2.0 * np.asarray(x)) ** g,
                  inverse=lambda y: (1.0 - (1.0 - np.asarray(y)) ** (1.0 / g)) / 2.0,
                  deriv_abs=lambda x: 2.0 * g * (1.0 - 2.0 * np.asarray(x)) ** (g - 1.0),
                  increasing=True, y_lo=0.0, y_hi=1.0)
    right = Branch(0.5, 1.0,
                   forward=lambda x: 1.0 - (2.0 * np.asarray(x) - 1.0) ** g,
                   inverse=lambda y: (1.0 + (1.0 - np.asarray(y)) ** (1.0 / g)) / 2.0,
                   deriv_abs=lambda x: 2.0 * g * (2.0 * np.asarray(x) - 1.0) ** (g - 1.0),
                   increasing=False, y_lo=0.0, y_hi=1.0)
    return PiecewiseMap(f"cusp({g})", (left, right), params={"gamma": g})


def builtin(name: str, **params) -> PiecewiseMap:
    """Map zoo: doubling, linear_mod1(k), tent, gauss(n_max), cusp(gamma), custom(spec)."""
    if name == "doubling":
        return _doubling()
    if name == "linear_mod1":
        return _linear_mod1(int(params["k"]))
    if name == "tent":
        return _tent()
    if name == "gauss":
        return _gauss(int(params.get("n_max", 64)))
    if name == "cusp":
        return _cusp(float(params["gamma"]))
    if name == "custom":
        return affine_map_from_spec(params["spec"], name=params.get("map_name", "custom"))
    raise BadParam(f"unknown builtin map {name!r}")


def periodic_point(pmap: PiecewiseMap, itinerary) -> PeriodicPoint:
    """Periodic point realizing a branch itinerary, by inverse-branch iteration.

    The composed inverse branches contract uniformly (expansion of the forward
    map), so plain fixed-point iteration is robust even next to branch ends.
    """
    if not itinerary:
        raise BadParam("itinerary must be nonempty")
    branches = [pmap.branches[i] for i in itinerary]
    x = 0.5 * (branches[0].lo + branches[0].hi)
    prev_step = np.inf
    for _ in range(400):
        y = x
        for br in reversed(branches):
            if not (br.y_lo - 1e-12 <= y <= br.y_hi + 1e-12):
                raise NotInDomain(f"value {y} outside image of branch [{br.lo}, {br.hi}]")
            y = float(br.inverse(y))
        step = abs(y - x)
        x = y
        if step <= 1e-15 * max(1.0, abs(x)):
            break
        if step > prev_step * (1.0 + 1e-9) and step > 1e-12:
            raise NoContraction("inverse-branch iteration is not contracting")
        prev_step = step
    else:
        raise NoContraction("inverse-branch iteration failed to settle")

    mult = 1.0
    orbit_x = x
    for br in branches:
        if not (br.lo - 1e-12 <= orbit_x <= br.hi + 1e-12):
            raise NotInDomain(f"orbit point {orbit_x} left branch [{br.lo}, {br.hi}]")
        mult *= float(br.deriv_abs(orbit_x))
        orbit_x = float(br.forward(orbit_x))
    return PeriodicPoint(z=x, period=len(branches), multiplier=mult)


def golden_epsilon_k(k: int) -> GoldenHole:
    """Exact interval around the golden mean mapped onto (0,1) by f(x)=1/x-1 after k steps.

    Endpoints come from the integer continued-fraction recursion
    d_{k+1} = d_k + d_{k-1}; the length is 1/(d_{k+1} d_k).  Python integers
    keep the arithmetic exact for any k.
    """
    if k < 1:
        raise BadParam("k must be >= 1")
    # M = [[0,1],[1,1]] encodes f^{-1}(x) = 1/(1+x); take its k-th power.
    a, b, c, d = 1, 0, 0, 1
    for _ in range(k):
        a, b, c, d = b, a + b, d, c + d
    lo = Fraction(b, d)              # f^{-k}(0)
    hi = Fraction(a + b, c + d)      # f^{-k}(1)
    if lo > hi:
        lo, hi = hi, lo
    eps = hi - lo
    ds = [1, 1]
    for _ in range(k):
        ds.append(ds[-1] + ds[-2])
    assert eps == Fraction(1, ds[k + 1] * ds[k])
    return GoldenHole(k=k, left=lo, right=hi, eps=eps)
