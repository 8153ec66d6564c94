"""Halfspace polytopes, invariant sets and grid scans.

Polytopes are stored as {x : H x <= h} with rows normalized to unit
infinity-norm normals so fixed-point detection (set_equal) is
reproducible. All set comparisons run through one-LP-per-row tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import (DEFAULT_SETTINGS, LpProblem, NumericSettings,
                       NumericsError, SolveStatus, lp_solve, spectral_radius)

CONTAIN_TOL = 1e-9
REDUNDANCY_TOL = 1e-8


class GeometryError(ValueError):
    pass


class Polytope:
    """{x in R^n : H x <= h}; rows are normalized on construction."""

    def __init__(self, H, h, normalize=True):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).reshape(-1)
        if H.shape[0] != h.size:
            raise GeometryError("row count of H must match length of h")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise GeometryError("polytope data must be finite")
        scale = np.max(np.abs(H), axis=1)
        if np.any(scale <= 0.0):
            raise GeometryError("zero-normal row in polytope")
        if normalize:
            H = H / scale[:, None]
            h = h / scale
        self.H = H
        self.h = h

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def num_rows(self) -> int:
        return self.H.shape[0]

    @classmethod
    def box(cls, bound, dim=2):
        """The box {|x_i| <= bound}."""
        eye = np.eye(dim)
        return cls(np.vstack([eye, -eye]), np.full(2 * dim, float(bound)))

    def contains(self, x, tol=CONTAIN_TOL) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise GeometryError(f"point dimension {x.size} != polytope dimension {self.dim}")
        return bool(np.all(self.H @ x <= self.h + tol))

    def contains_many(self, X, tol=CONTAIN_TOL) -> np.ndarray:
        """Vectorized membership for an (N, n) array of points."""
        X = np.asarray(X, dtype=float)
        return np.all(X @ self.H.T <= self.h + tol, axis=1)

    def is_empty(self, settings: NumericSettings = DEFAULT_SETTINGS) -> bool:
        res = lp_solve(LpProblem(np.zeros(self.dim), self.H, self.h), settings)
        return res.status is not SolveStatus.OPTIMAL

    def support(self, direction, settings: NumericSettings = DEFAULT_SETTINGS):
        """max direction'x over the polytope; +inf when unbounded, None if empty."""
        res = lp_solve(LpProblem(-np.asarray(direction, dtype=float),
                                 self.H, self.h), settings)
        if res.status is SolveStatus.OPTIMAL:
            return -res.value
        if res.status is SolveStatus.UNBOUNDED:
            return np.inf
        return None

    def remove_redundancy(self, settings: NumericSettings = DEFAULT_SETTINGS) -> "Polytope":
        """Drop every row implied by the others (one LP per row).

        Row i is redundant iff maximizing H_i x over the remaining rows
        gives a value <= h_i + tol. Rows are tested in order against the
        currently kept set, so exact duplicates collapse to one copy.
        """
        H, h = self.H.copy(), self.h.copy()
        i = 0
        while i < h.size and h.size > 1:
            Ht = np.delete(H, i, axis=0)
            ht = np.delete(h, i)
            val = Polytope(Ht, ht, normalize=False).support(H[i], settings)
            if val is not None and val != np.inf and val <= h[i] + REDUNDANCY_TOL:
                H, h = Ht, ht
            else:
                i += 1
        return Polytope(H, h, normalize=False)

    def intersect(self, other: "Polytope",
                  settings: NumericSettings = DEFAULT_SETTINGS) -> "Polytope":
        if other.dim != self.dim:
            raise GeometryError("dimension mismatch in intersection")
        stacked = Polytope(np.vstack([self.H, other.H]),
                           np.concatenate([self.h, other.h]), normalize=False)
        return stacked.remove_redundancy(settings)

    def subset_of(self, other: "Polytope",
                  settings: NumericSettings = DEFAULT_SETTINGS) -> bool:
        for row, rhs in zip(other.H, other.h):
            val = self.support(row, settings)
            if val is None:
                return True  # empty set is a subset of anything
            if val == np.inf or val > rhs + REDUNDANCY_TOL:
                return False
        return True

    def set_equal(self, other: "Polytope",
                  settings: NumericSettings = DEFAULT_SETTINGS) -> bool:
        return self.subset_of(other, settings) and other.subset_of(self, settings)

    def bounding_box(self, settings: NumericSettings = DEFAULT_SETTINGS):
        """(lo, hi) per coordinate; raises on an unbounded polytope."""
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            up, down = self.support(e, settings), self.support(-e, settings)
            if up is None or down is None:
                raise GeometryError("empty polytope has no bounding box")
            if up == np.inf or down == np.inf:
                raise GeometryError("unbounded polytope")
            lo[i], hi[i] = -down, up
        return lo, hi

    def to_dict(self):
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["H"], d["h"])

    def __repr__(self):
        return f"Polytope({self.num_rows} rows, dim {self.dim})"


class SublevelSet:
    """Quadratic sublevel set {x : x'Kx <= alpha} with K symmetric PD."""

    def __init__(self, K, alpha):
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if np.max(np.abs(K - K.T)) > 1e-10 * max(1.0, np.max(np.abs(K))):
            raise GeometryError("sublevel set needs a symmetric matrix")
        if alpha <= 0:
            raise GeometryError("sublevel value must be positive")
        self.K = 0.5 * (K + K.T)
        self.alpha = float(alpha)

    @property
    def dim(self) -> int:
        return self.K.shape[0]

    def contains(self, x, tol=CONTAIN_TOL) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(x @ self.K @ x <= self.alpha + tol)

    def contains_many(self, X, tol=CONTAIN_TOL) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.einsum("ij,jk,ik->i", X, self.K, X) <= self.alpha + tol

    def bounding_box(self, settings=None):
        Kinv = np.linalg.inv(self.K)
        half = np.sqrt(self.alpha * np.diag(Kinv))
        return -half, half

    def to_dict(self):
        return {"K": self.K.tolist(), "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d):
        return cls(d["K"], d["alpha"])

    def __repr__(self):
        return f"SublevelSet(dim {self.dim}, alpha {self.alpha:.6g})"


@dataclass
class InvariantSetResult:
    polytope: Polytope
    certified: bool
    iterations: int


def invariant_set(A_cl, X_c: Polytope, max_iter=200,
                  settings: NumericSettings = DEFAULT_SETTINGS) -> InvariantSetResult:
    """Maximal constraint-admissible invariant set of x+ = A_cl x within X_c.

    Iterates O_{k+1} = O_k intersect {x : A_cl x in O_k} from O_0 = X_c and
    stops at the set fixed point. Finite determination needs a stable A_cl
    and a bounded X_c containing the origin; the spectral radius is checked
    here, boundedness shows up as LP unboundedness during the iteration.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    rho = spectral_radius(A_cl)
    if rho >= 1.0 - 1e-9:
        raise GeometryError(f"invariant_set requires spectral radius < 1, got {rho:.6f}")
    O = X_c.remove_redundancy(settings)
    for it in range(1, max_iter + 1):
        pre = Polytope(O.H @ A_cl, O.h, normalize=False)
        nxt = O.intersect(pre, settings)
        if nxt.set_equal(O, settings):
            return InvariantSetResult(nxt, True, it)
        O = nxt
    return InvariantSetResult(O, False, max_iter)


def sublevel_alpha(K, X_c: Polytope,
                   settings: NumericSettings = DEFAULT_SETTINGS) -> float:
    """Largest alpha with {x : x'Kx <= alpha} inside the polytope X_c.

    Per facet H_i x = h_i the closest sublevel value is h_i^2 / (H_i K^-1 H_i');
    the inscribed value is the minimum over facets. Requires K symmetric PD
    and the origin in the interior of X_c (all h_i > 0).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    vals = np.linalg.eigvalsh(0.5 * (K + K.T))
    if vals.min() <= 0:
        raise GeometryError("sublevel_alpha requires a positive definite matrix")
    if np.any(X_c.h <= 0):
        raise GeometryError("sublevel_alpha requires the origin in the interior")
    Kinv = np.linalg.inv(K)
    quad = np.einsum("ij,jk,ik->i", X_c.H, Kinv, X_c.H)
    return float(np.min(X_c.h ** 2 / quad))


def vertices_2d(P: Polytope, settings: NumericSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Vertices of a bounded 2-D polytope, ordered by angle.

    Enumerates pairwise facet intersections and keeps the points the
    polytope contains (tolerance 1e-7 to absorb normalization round-off).
    """
    if P.dim != 2:
        raise GeometryError("vertex enumeration implemented for dimension 2 only")
    P.bounding_box(settings)  # raises on unbounded input
    pts = []
    m = P.num_rows
    for i in range(m):
        for j in range(i + 1, m):
            M = np.array([P.H[i], P.H[j]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            v = np.linalg.solve(M, np.array([P.h[i], P.h[j]]))
            if P.contains(v, tol=1e-7):
                pts.append(v)
    if not pts:
        return np.zeros((0, 2))
    pts = np.array(pts)
    keep = []
    for v in pts:
        if not any(np.linalg.norm(v - w) <= 1e-7 for w in keep):
            keep.append(v)
    keep = np.array(keep)
    center = keep.mean(axis=0)
    order = np.argsort(np.arctan2(keep[:, 1] - center[1], keep[:, 0] - center[0]))
    return keep[order]


# ---------------------------------------------------------------------------
# grid scans
# ---------------------------------------------------------------------------

INFINITE_LABEL = 0  # per-cell label when every unit evaluates to +inf


@dataclass
class SupportScan:
    """Grid labels: 1..p for the lowest-index minimizing unit, 0 for +inf."""

    xs: np.ndarray
    ys: np.ndarray
    labels: np.ndarray  # shape (len(xs), len(ys)), integer

    @property
    def spacing(self) -> float:
        return float(self.xs[1] - self.xs[0]) if self.xs.size > 1 else 0.0

    def finite_mask(self) -> np.ndarray:
        return self.labels != INFINITE_LABEL

    def finite_count(self) -> int:
        return int(np.count_nonzero(self.finite_mask()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "label"])
            for i, x in enumerate(self.xs):
                for j, y in enumerate(self.ys):
                    lab = self.labels[i, j]
                    w.writerow([f"{x:.10g}", f"{y:.10g}",
                                "inf" if lab == INFINITE_LABEL else int(lab)])


def grid_axis(lo, hi, spacing):
    n = int(round((hi - lo) / spacing))
    return lo + spacing * np.arange(n + 1)


def support_scan(evaluator, box, spacing) -> SupportScan:
    """Label each grid point by the lowest-index argmin of the unit values.

    `evaluator(x)` returns one value in [0, inf] per unit; a label of 0
    means every unit returned +inf. Evaluation order is row-major and the
    labels do not depend on it.
    """
    x_lo, x_hi, y_lo, y_hi = box
    xs = grid_axis(x_lo, x_hi, spacing)
    ys = grid_axis(y_lo, y_hi, spacing)
    labels = np.zeros((xs.size, ys.size), dtype=int)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            vals = np.asarray(evaluator(np.array([x, y])), dtype=float)
            if np.all(np.isinf(vals)):
                labels[i, j] = INFINITE_LABEL
            else:
                labels[i, j] = int(np.argmin(vals)) + 1
    return SupportScan(xs, ys, labels)
