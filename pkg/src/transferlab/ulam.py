"""Discretized transfer operators on interval partitions.

All matrix entries are exact overlap measures (up to float rounding), never
quadrature approximations: 1D entries integrate branch preimages against
cells, noise entries use closed-form double integrals of the kernel, and the
2D coupled builder clips affine images of cells against the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .intervalmaps import PiecewiseMap
from .spectral import FiniteOperator


class ScaleTooCoarse(ValueError):
    """Noise kernel narrower than two cells cannot be resolved."""


class ExpansionTooWeak(ValueError):
    """Coupled 2D map violates the minimal-expansion requirement."""


@dataclass(frozen=True)
class Partition1D:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValueError("partition must span [0, 1]")
        if np.diff(nodes).min() <= 0.0:
            raise ValueError("partition nodes must be strictly increasing")

    @classmethod
    def uniform(cls, n_cells: int) -> "Partition1D":
        return cls(np.linspace(0.0, 1.0, n_cells + 1))

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @property
    def weights(self) -> np.ndarray:
        return np.diff(self.nodes)

    def insert(self, points) -> "Partition1D":
        """New partition with extra nodes; near-duplicates (1e-13) are dropped."""
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        pts = pts[(pts > 0.0) & (pts < 1.0)]
        merged = np.sort(np.concatenate([self.nodes, pts]))
        keep = np.concatenate([[True], np.diff(merged) > 1e-13])
        return Partition1D(merged[keep])

    def cell_of(self, x: float) -> int:
        idx = int(np.searchsorted(self.nodes, x, side="right")) - 1
        return min(max(idx, 0), self.n_cells - 1)


def _merge_touching(intervals):
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1] + 1e-15:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


@dataclass(frozen=True)
class HoleSpec:
    """Trap region: a union of intervals in [0,1], or the diagonal strip |x-y|<=eps."""

    intervals: tuple = ()
    strip: float | None = None

    @classmethod
    def from_intervals(cls, intervals) -> "HoleSpec":
        merged = _merge_touching([(float(a), float(b)) for a, b in intervals])
        for a, b in merged:
            if not (0.0 <= a < b <= 1.0):
                raise ValueError(f"bad hole interval [{a}, {b}]")
        return cls(intervals=tuple(merged))

    @classmethod
    def interval(cls, a: float, b: float) -> "HoleSpec":
        return cls.from_intervals([(a, b)])

    @classmethod
    def diagonal(cls, eps: float) -> "HoleSpec":
        if not 0.0 <= eps < 1.0:
            raise ValueError("strip half-width must lie in [0, 1)")
        return cls(strip=float(eps))

    @property
    def measure(self) -> float:
        if self.strip is not None:
            e = self.strip
            return 2.0 * e - e * e
        return float(sum(b - a for a, b in self.intervals))

    @property
    def endpoints(self) -> np.ndarray:
        return np.array([x for ab in self.intervals for x in ab])

    def covers(self, other: "HoleSpec") -> bool:
        """True if this (1D) hole contains the other one."""
        for a, b in other.intervals:
            if not any(c - 1e-14 <= a and b <= d + 1e-14 for c, d in self.intervals):
                return False
        return True


def _overlap_lengths(lo, hi, nodes):
    """Exact overlap of [lo, hi] with every partition cell (vectorized)."""
    return np.clip(np.minimum(hi, nodes[1:]) - np.maximum(lo, nodes[:-1]), 0.0, None)


def build_ulam_1d(pmap: PiecewiseMap, part: Partition1D) -> FiniteOperator:
    """Exact transfer matrix: entry(i,j) = m(A_i & T^-1 A_j) / m(A_i).

    Preimages are computed from the analytic branch inverses, so the only row
    defect is the mass of truncated branches (Gauss); it is reported in
    ``meta['truncation_defect']``, with a warning flag above 0.02.
    """
    nodes = part.nodes
    w = part.weights
    rows, cols, vals = [], [], []
    for br in pmap.branches:
        ylo, yhi = br.y_lo, br.y_hi
        inner = nodes[(nodes > ylo) & (nodes < yhi)]
        ys = np.concatenate([[ylo], inner, [yhi]])
        col_ids = np.searchsorted(nodes, 0.5 * (ys[:-1] + ys[1:]), side="right") - 1
        xs = np.asarray(br.inverse(ys), dtype=float)
        if not br.increasing:
            xs = xs[::-1]
            col_ids = col_ids[::-1]
        xs = np.clip(xs, br.lo, br.hi)
        xs = np.maximum.accumulate(xs)
        inner_nodes = nodes[(nodes > xs[0]) & (nodes < xs[-1])]
        t = np.unique(np.concatenate([xs, inner_nodes]))
        if t.size < 2:
            continue
        mids = 0.5 * (t[:-1] + t[1:])
        seg_rows = np.searchsorted(nodes, mids, side="right") - 1
        seg_cols = col_ids[np.searchsorted(xs, mids, side="right") - 1]
        seg_len = np.diff(t)
        keep = seg_len > 0.0
        rows.append(seg_rows[keep])
        cols.append(seg_cols[keep])
        vals.append(seg_len[keep] / w[seg_rows[keep]])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(part.n_cells, part.n_cells)).tocsr()
    op = FiniteOperator.from_matrix(mat, w, meta={"map": pmap.name})
    op.meta["truncation_defect"] = pmap.dropped_mass
    op.meta["defect_warning"] = pmap.dropped_mass > 0.02
    op.meta["min_row_sum"] = float(op.row_sums.min())
    return op


def refine_for_hole(part: Partition1D, hole: HoleSpec) -> Partition1D:
    if hole.strip is not None:
        raise ValueError("refinement applies to 1D holes")
    return part.insert(hole.endpoints)


def mask_hole(op: FiniteOperator, part: Partition1D, hole: HoleSpec) -> FiniteOperator:
    """Scale each row by the fraction of its cell outside the hole."""
    if hole.strip is not None:
        raise ValueError("use mask_strip for the 2D diagonal hole")
    w = part.weights
    inside = np.zeros(part.n_cells)
    for a, b in hole.intervals:
        inside += _overlap_lengths(a, b, part.nodes)
    frac_out = np.clip(1.0 - inside / w, 0.0, 1.0)
    if sp.issparse(op.matrix):
        mat = sp.csr_matrix(op.matrix.multiply(frac_out[:, None]))
    else:
        mat = op.matrix * frac_out[:, None]
    meta = {k: v for k, v in op.meta.items() if not k.startswith("_")}
    meta["hole_measure"] = hole.measure
    return FiniteOperator(mat, op.weights,
                          stochastic=op.stochastic and hole.measure == 0.0,
                          substochastic=True, meta=meta)


# ---------------------------------------------------------------------------
# noise kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseKernelSpec:
    """Additive-noise kernel on [-1, 1], applied at scale eps with reflection.

    ``kind`` is 'uniform' (density 1/2) or 'bump' (C^1 density 15/16 (1-u^2)^2).
    Both are symmetric, so E[Z] = 0.
    """

    kind: str
    scale: float
    boundary: str = "reflect"

    def __post_init__(self):
        if self.kind not in ("uniform", "bump"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.boundary != "reflect":
            raise ValueError("only the reflect boundary mode is implemented")
        if self.scale < 0.0:
            raise ValueError("kernel scale must be nonnegative")

    @property
    def mean_z(self) -> float:
        return 0.0

    @property
    def e_abs_z(self) -> float:
        # int |u| K(u) du
        return 0.5 if self.kind == "uniform" else 5.0 / 16.0

    def pdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
        return np.where(np.abs(u) <= 1.0, (15.0 / 16.0) * (1.0 - u * u) ** 2, 0.0)

    def k2(self, u):
        """Second antiderivative of the density, with k2(-1)=0, k2'(-1)=0."""
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            mid = 0.25 * (u + 1.0) ** 2
        else:
            mid = (15.0 / 16.0) * (u * u / 2.0 - u ** 4 / 6.0 + u ** 6 / 30.0) \
                + 0.5 * u + 5.0 / 32.0
        return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, u, mid))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-1.0, 1.0, size)
        return 2.0 * rng.beta(3.0, 3.0, size) - 1.0


def _pair_integral(kern, eps, a1, b1, a2, b2):
    """Exact int_{a1}^{b1} int_{a2}^{b2} eps^-1 K((y - x)/eps) dy dx."""
    f = lambda t: kern.k2(t / eps)
    return eps * (f(b2 - a1) - f(a2 - a1) - f(b2 - b1) + f(a2 - b1))


def _noise_row(kern, eps, a1, b1, lo, hi):
    """Kernel mass from source cell [a1,b1] into target cells, reflected at 0 and 1."""
    main = _pair_integral(kern, eps, a1, b1, lo, hi)
    # mirror image across 0: replace x by -x
    main += _pair_integral(kern, eps, -b1, -a1, lo, hi)
    # mirror image across 1: replace x by 2 - x
    main += _pair_integral(kern, eps, 2.0 - b1, 2.0 - a1, lo, hi)
    return main


def noise_matrix(part: Partition1D, noise: NoiseKernelSpec) -> FiniteOperator:
    """Markov matrix of the reflected additive-noise kernel on the partition."""
    eps = noise.scale
    nodes, w = part.nodes, part.weights
    n = part.n_cells
    rows, cols, vals = [], [], []
    for i in range(n):
        a1, b1 = nodes[i], nodes[i + 1]
        jlo = max(0, int(np.searchsorted(nodes, a1 - eps, "right")) - 1)
        jhi = min(n, int(np.searchsorted(nodes, b1 + eps, "left")) + 1)
        if a1 < eps:       # 0-mirror reaches [0, eps - a1]
            jlo = 0
        if b1 > 1.0 - eps:  # 1-mirror reaches [2 - b1 - eps, 1]
            jhi = n
        js = np.arange(jlo, jhi)
        lo, hi = nodes[js], nodes[js + 1]
        mass = _noise_row(noise, eps, a1, b1, lo, hi)
        keep = mass > 1e-300
        rows.append(np.full(keep.sum(), i))
        cols.append(js[keep])
        vals.append(mass[keep] / w[i])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    return FiniteOperator.from_matrix(mat, w, meta={"noise": (noise.kind, eps)})


def compose_noise(op: FiniteOperator, part: Partition1D,
                  noise: NoiseKernelSpec) -> FiniteOperator:
    """Matrix of (map operator) o (noise averaging); identity at scale 0."""
    if noise.scale == 0.0:
        return op
    if not op.stochastic:
        raise ValueError("noise composition expects a stochastic base operator")
    if noise.scale < 2.0 * part.weights.max():
        raise ScaleTooCoarse(
            f"kernel scale {noise.scale} below two cell widths "
            f"({2.0 * part.weights.max():.3e})")
    if noise.scale > 0.5:
        raise ValueError("kernel scale above 1/2 needs multiple reflections")
    pi = noise_matrix(part, noise)
    mat = sp.csr_matrix(pi.matrix @ op.matrix)
    out = FiniteOperator.from_matrix(mat, part.weights, meta=dict(op.meta))
    out.meta["noise"] = (noise.kind, noise.scale)
    if not out.stochastic:
        raise AssertionError("noise composition lost stochasticity")
    return out


# ---------------------------------------------------------------------------
# coupled 2D builder
# ---------------------------------------------------------------------------

def _axis_pieces(pmap: PiecewiseMap, n: int):
    """Elementary x-intervals refined by grid and branch nodes.

    Returns arrays (cell, branch, x_lo, x_hi) covering [0,1].
    """
    grid = np.linspace(0.0, 1.0, n + 1)
    branch_nodes = np.array([br.lo for br in pmap.branches] + [1.0])
    t = np.unique(np.concatenate([grid, branch_nodes]))
    mids = 0.5 * (t[:-1] + t[1:])
    cell = np.searchsorted(grid, mids, side="right") - 1
    los = np.array([br.lo for br in pmap.branches])
    branch = np.searchsorted(los, mids, side="right") - 1
    return cell, branch, t[:-1], t[1:]


def _band_area(alpha0, alpha1, beta0, beta1, X0, X1, Y0, Y1, delta):
    """Exact area of {X0<=(1-d)a+d b<=X1, Y0<=d a+(1-d) b<=Y1} in the box.

    The admissible beta-window is an intersection of two moving intervals and
    the box, so its length is piecewise linear in alpha; integrating the
    trapezoids between all kink locations is exact.
    """
    d = delta
    m1 = -(1.0 - d) / d
    m2 = -d / (1.0 - d)
    cL1 = X0 / d
    cU1 = X1 / d
    cL2 = Y0 / (1.0 - d)
    cU2 = Y1 / (1.0 - d)

    def cross(ma, ca, mb, cb):
        return (cb - ca) / (ma - mb)

    cand = [
        cross(m1, cL1, m2, cL2), cross(m1, cL1, 0.0, beta0), cross(m2, cL2, 0.0, beta0),
        cross(m1, cU1, m2, cU2), cross(m1, cU1, 0.0, beta1), cross(m2, cU2, 0.0, beta1),
        cross(m1, cU1, m2, cL2), cross(m1, cU1, 0.0, beta0),
        cross(m2, cU2, m1, cL1), cross(m2, cU2, 0.0, beta0),
        cross(0.0, beta1, m1, cL1), cross(0.0, beta1, m2, cL2),
    ]
    nodes = np.stack([np.clip(c, alpha0, alpha1) for c in cand] + [alpha0, alpha1], axis=-1)
    nodes = np.sort(nodes, axis=-1)

    a = nodes
    lower = np.maximum(np.maximum(m1 * a + cL1[..., None], m2 * a + cL2[..., None]),
                       beta0[..., None])
    upper = np.minimum(np.minimum(m1 * a + cU1[..., None], m2 * a + cU2[..., None]),
                       beta1[..., None])
    length = np.clip(upper - lower, 0.0, None)
    return np.sum(np.diff(nodes, axis=-1) * 0.5 * (length[..., :-1] + length[..., 1:]),
                  axis=-1)


def _assemble_2d_coupled(pmap: PiecewiseMap, delta: float, n: int,
                         chunk: int = 16) -> sp.csr_matrix:
    """Direct clipped assembly of the coupled-map matrix for delta > 0."""
    s = abs(pmap.branches[0].slope)
    cell, _branch, xlo, xhi = _axis_pieces(pmap, n)
    # branch images of the elementary intervals (sorted endpoint pairs)
    f_lo = np.empty_like(xlo)
    f_hi = np.empty_like(xhi)
    for bi, br in enumerate(pmap.branches):
        m = _branch == bi
        a, b = np.asarray(br.forward(xlo[m])), np.asarray(br.forward(xhi[m]))
        f_lo[m], f_hi[m] = np.minimum(a, b), np.maximum(a, b)
    f_lo = np.clip(f_lo, 0.0, 1.0)
    f_hi = np.clip(f_hi, 0.0, 1.0)

    naxis = cell.size
    h = 1.0 / n
    out_rows, out_cols, out_vals = [], [], []
    for start in range(0, naxis, chunk):
        sl = slice(start, min(start + chunk, naxis))
        cx = cell[sl]
        # pair each x-piece of the chunk with every y-piece
        i1 = np.repeat(cx, naxis)
        a0 = np.repeat(f_lo[sl], naxis)
        a1 = np.repeat(f_hi[sl], naxis)
        i2 = np.tile(cell, cx.size)
        b0 = np.tile(f_lo, cx.size)
        b1 = np.tile(f_hi, cx.size)

        Xlo = (1.0 - delta) * a0 + delta * b0
        Xhi = (1.0 - delta) * a1 + delta * b1
        Ylo = delta * a0 + (1.0 - delta) * b0
        Yhi = delta * a1 + (1.0 - delta) * b1
        j1lo = np.clip((Xlo * n).astype(int), 0, n - 1)
        j1hi = np.clip(np.ceil(Xhi * n).astype(int) - 1, 0, n - 1)
        j2lo = np.clip((Ylo * n).astype(int), 0, n - 1)
        j2hi = np.clip(np.ceil(Yhi * n).astype(int) - 1, 0, n - 1)
        k1 = j1hi - j1lo + 1
        k2 = j2hi - j2lo + 1

        kk = k1 * k2
        rep = np.repeat(np.arange(i1.size), kk)
        offs = np.arange(kk.sum()) - np.repeat(np.cumsum(kk) - kk, kk)
        j1 = j1lo[rep] + offs // k2[rep]
        j2 = j2lo[rep] + offs % k2[rep]

        area = _band_area(a0[rep], a1[rep], b0[rep], b1[rep],
                          j1 * h, (j1 + 1) * h, j2 * h, (j2 + 1) * h, delta)
        mass = area / (s * s)
        keep = mass > 0.0
        out_rows.append((i1[rep][keep] * n + i2[rep][keep]).astype(np.int64))
        out_cols.append((j1[keep] * n + j2[keep]).astype(np.int64))
        out_vals.append(mass[keep] / (h * h))
    mat = sp.coo_matrix(
        (np.concatenate(out_vals), (np.concatenate(out_rows), np.concatenate(out_cols))),
        shape=(n * n, n * n))
    return mat.tocsr()


def strip_outside_fractions(n: int, eps: float) -> np.ndarray:
    """Fraction of each N x N grid cell outside the strip |x-y| <= eps (exact)."""
    h = 1.0 / n
    i = np.arange(n)
    d = (i[None, :] - i[:, None]) * h  # offset of y-cell relative to x-cell

    def tri_cdf(sv):
        sv = np.asarray(sv, dtype=float)
        return np.where(sv <= -1.0, 0.0,
                        np.where(sv >= 1.0, 1.0,
                                 np.where(sv <= 0.0, 0.5 * (sv + 1.0) ** 2,
                                          1.0 - 0.5 * (1.0 - sv) ** 2)))

    inside = tri_cdf((eps - d) / h) - tri_cdf((-eps - d) / h)
    return np.clip(1.0 - inside, 0.0, 1.0).ravel()


def mask_strip(op: FiniteOperator, n: int, eps: float) -> FiniteOperator:
    """Row-scale a 2D operator by the exact cell fractions outside |x-y| <= eps."""
    frac = strip_outside_fractions(n, eps)
    mat = sp.csr_matrix(op.matrix.multiply(frac[:, None])) if sp.issparse(op.matrix) \
        else op.matrix * frac[:, None]
    meta = {k: v for k, v in op.meta.items() if not k.startswith("_")}
    meta["strip_eps"] = eps
    return FiniteOperator(mat, op.weights, stochastic=op.stochastic and eps == 0.0,
                          substochastic=True, meta=meta)


def build_ulam_2d(map1d: PiecewiseMap, delta: float, n: int,
                  strip_eps: float = 0.0) -> FiniteOperator:
    """Coupled two-map operator   (x,y) -> ((1-d)T(x)+dT(y), (1-d)T(y)+dT(x)).

    Requires an affine full-branch 1D map with (1-2 delta) |T'| > 4.  For
    delta = 0 the matrix is the exact Kronecker square of the 1D matrix;
    otherwise affine images of grid cells are clipped against the grid.
    """
    slopes = [br.slope for br in map1d.branches]
    if any(sl is None for sl in slopes):
        raise ValueError("coupled builder needs a piecewise-linear map")
    s = abs(slopes[0])
    if any(abs(abs(sl) - s) > 1e-12 for sl in slopes):
        raise ValueError("coupled builder assumes a single expansion rate")
    if not 0.0 <= delta < 0.5:
        raise ValueError("coupling must lie in [0, 1/2)")
    if (1.0 - 2.0 * delta) * s <= 4.0:
        raise ExpansionTooWeak(f"(1-2*{delta}) * {s} <= 4")
    if n > 1024:
        raise ValueError("2D grid limited to 1024 cells per axis")

    part = Partition1D.uniform(n)
    if delta == 0.0:
        m1 = build_ulam_1d(map1d, part)
        mat = sp.csr_matrix(sp.kron(m1.matrix, m1.matrix))
    else:
        mat = _assemble_2d_coupled(map1d, delta, n)
    w2 = np.outer(part.weights, part.weights).ravel()
    op = FiniteOperator.from_matrix(mat, w2, meta={
        "map": map1d.name, "delta": delta, "grid_n": n})
    if not op.stochastic:
        raise AssertionError("coupled assembly lost stochasticity")
    if strip_eps > 0.0:
        op = mask_strip(op, n, strip_eps)
        op.meta["grid_n"] = n
    return op


# ---------------------------------------------------------------------------
# operator export / import
# ---------------------------------------------------------------------------

def save_operator(op: FiniteOperator, prefix: str) -> None:
    """Write '<prefix>.triplets' (row col value) and '<prefix>.json' (header)."""
    mat = sp.coo_matrix(op.matrix)
    with open(prefix + ".triplets", "w") as fh:
        for r, c, v in zip(mat.row, mat.col, mat.data):
            fh.write(f"{r} {c} {v!r}\n")
    header = {
        "dim": op.dim,
        "weights": [repr(float(x)) for x in op.weights],
        "stochastic": op.stochastic,
        "substochastic": op.substochastic,
        "meta": {k: v for k, v in op.meta.items()
                 if not k.startswith("_") and _json_safe(v)},
    }
    with open(prefix + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)


def _json_safe(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def load_operator(prefix: str) -> FiniteOperator:
    with open(prefix + ".json") as fh:
        header = json.load(fh)
    rows, cols, vals = [], [], []
    with open(prefix + ".triplets") as fh:
        for line in fh:
            r, c, v = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    dim = header["dim"]
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
    return FiniteOperator(mat, np.array([float(x) for x in header["weights"]]),
                          stochastic=header["stochastic"],
                          substochastic=header["substochastic"],
                          meta=header.get("meta", {}))
