"""Dense small-scale convex solvers and matrix-equation routines.

Everything here is deterministic and single-threaded: problems in this
package never exceed a few dozen variables, so there is no sparse
machinery, and anti-cycling rules (Bland for the simplex, lowest-index
tie-breaks for the active set) make repeated runs bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class NumericsError(ValueError):
    """Raised on malformed inputs or violated solver preconditions."""


@dataclass(frozen=True)
class NumericSettings:
    """Single source of truth for solver tolerances."""

    feas_tol: float = 1e-8
    stat_tol: float = 1e-8
    pivot_tol: float = 1e-10
    lyap_rel_residual: float = 1e-10
    riccati_residual: float = 1e-9
    riccati_step_tol: float = 1e-11
    riccati_max_iter: int = 100_000
    qp_iter_factor: int = 50
    lp_max_iter: int = 50_000


DEFAULT_SETTINGS = NumericSettings()


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


@dataclass(frozen=True)
class LpProblem:
    """min c'x  s.t.  G x <= h,  A_eq x = b_eq (optional)."""

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 x'Hx + f'x  s.t.  G x <= h,  A_eq x = b_eq (optional).

    H must be symmetric positive definite.
    """

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None


@dataclass
class SolveResult:
    status: SolveStatus
    x: np.ndarray | None
    value: float | None
    iterations: int = 0
    active: tuple[int, ...] = ()


def _as_2d(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise NumericsError(f"{name} must be 2-dimensional, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericsError(f"{name} contains non-finite entries")
    return M

def _as_1d(v, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NumericsError(f"{name} contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# linear programming: two-phase dense simplex with Bland's rule
# ---------------------------------------------------------------------------

def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _simplex(T, basis, ncols, settings):
    """Run the simplex on tableau T (last row = reduced costs, last col = rhs).

    Entering variable: lowest index with negative reduced cost (Bland).
    Leaving variable: min ratio; ties broken by lowest basic-variable index.
    """
    for it in range(settings.lp_max_iter):
        red = T[-1, :ncols]
        enter = -1
        for j in range(ncols):
            if red[j] < -settings.pivot_tol:
                enter = j
                break
        if enter < 0:
            return SolveStatus.OPTIMAL, it
        best_ratio, leave = None, -1
        for i in range(T.shape[0] - 1):
            a = T[i, enter]
            if a > settings.pivot_tol:
                ratio = T[i, -1] / a
                if (best_ratio is None or ratio < best_ratio - settings.pivot_tol
                        or (abs(ratio - best_ratio) <= settings.pivot_tol
                            and basis[i] < basis[leave])):
                    best_ratio, leave = ratio, i
        if leave < 0:
            return SolveStatus.UNBOUNDED, it
        _pivot(T, basis, leave, enter)
    return SolveStatus.ITER_LIMIT, settings.lp_max_iter


def lp_solve(p: LpProblem, settings: NumericSettings = DEFAULT_SETTINGS) -> SolveResult:
    """Solve an LP over free variables via the two-phase simplex.

    Free variables are split x = x+ - x-; every row gets an artificial
    variable so phase 1 always starts from the identity basis.
    """
    c = _as_1d(p.c, "c")
    G = _as_2d(p.G, "G") if p.G is not None and np.size(p.G) else np.zeros((0, c.size))
    h = _as_1d(p.h, "h") if p.h is not None and np.size(p.h) else np.zeros(0)
    if G.shape[0] != h.size or G.shape[1] != c.size:
        raise NumericsError("inconsistent LP dimensions")
    A_eq = _as_2d(p.A_eq, "A_eq") if p.A_eq is not None else np.zeros((0, c.size))
    b_eq = _as_1d(p.b_eq, "b_eq") if p.b_eq is not None else np.zeros(0)
    if A_eq.shape[0] != b_eq.size or (A_eq.size and A_eq.shape[1] != c.size):
        raise NumericsError("inconsistent LP equality dimensions")

    n = c.size
    m_in, m_eq = G.shape[0], A_eq.shape[0]
    m = m_in + m_eq
    nslack = m_in
    ncols = 2 * n + nslack + m  # x+, x-, slacks, artificials

    rows = np.zeros((m, ncols + 1))
    rows[:m_in, :n] = G
    rows[:m_in, n:2 * n] = -G
    rows[:m_in, 2 * n:2 * n + nslack] = np.eye(m_in)
    rows[:m_in, -1] = h
    if m_eq:
        rows[m_in:, :n] = A_eq
        rows[m_in:, n:2 * n] = -A_eq
        rows[m_in:, -1] = b_eq
    # artificials form the starting basis; rhs must be nonnegative first
    for i in range(m):
        if rows[i, -1] < 0:
            rows[i] = -rows[i]
    art0 = 2 * n + nslack
    for i in range(m):
        rows[i, art0 + i] = 1.0

    T = np.vstack([rows, np.zeros(ncols + 1)])
    basis = [art0 + i for i in range(m)]
    # phase-1 objective: sum of artificials, priced out against the basis
    T[-1, art0:art0 + m] = 1.0
    for i in range(m):
        T[-1] -= T[i]
    status, it1 = _simplex(T, basis, ncols, settings)
    if status is SolveStatus.ITER_LIMIT:
        return SolveResult(status, None, None, it1)
    if -T[-1, -1] > settings.feas_tol:
        return SolveResult(SolveStatus.INFEASIBLE, None, None, it1)
    # drive remaining artificial basics out (or drop redundant rows)
    drop = []
    for i in range(m):
        if basis[i] >= art0:
            j = next((j for j in range(art0) if abs(T[i, j]) > settings.pivot_tol), -1)
            if j < 0:
                drop.append(i)
            else:
                _pivot(T, basis, i, j)
    if drop:
        keep = [i for i in range(m) if i not in drop] + [m]
        T = T[keep]
        basis = [basis[i] for i in range(m) if i not in drop]

    # phase 2: real objective on the split variables
    T[:, art0:art0 + m] = 0.0
    cost = np.zeros(ncols + 1)
    cost[:n] = c
    cost[n:2 * n] = -c
    T[-1] = cost
    for i, b in enumerate(basis):
        if abs(cost[b]) > 0:
            T[-1] -= cost[b] * T[i]
    status, it2 = _simplex(T, basis, art0, settings)
    if status is not SolveStatus.OPTIMAL:
        return SolveResult(status, None, None, it1 + it2)

    z = np.zeros(ncols)
    for i, b in enumerate(basis):
        z[b] = T[i, -1]
    x = z[:n] - z[n:2 * n]
    return SolveResult(SolveStatus.OPTIMAL, x, float(c @ x), it1 + it2)


def lp_feasible_point(G, h, settings: NumericSettings = DEFAULT_SETTINGS):
    """Return some x with G x <= h, or None when the system is infeasible."""
    G = _as_2d(G, "G")
    res = lp_solve(LpProblem(np.zeros(G.shape[1]), G, h), settings)
    return res.x if res.status is SolveStatus.OPTIMAL else None


# ---------------------------------------------------------------------------
# quadratic programming: primal active set
# ---------------------------------------------------------------------------

def _kkt_step(H, g, C):
    """Solve min 1/2 p'Hp + g'p s.t. C p = 0; returns (p, multipliers)."""
    n = H.shape[0]
    k = C.shape[0]
    if k == 0:
        return np.linalg.solve(H, -g), np.zeros(0)
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = H
    KKT[:n, n:] = C.T
    KKT[n:, :n] = C
    rhs = np.concatenate([-g, np.zeros(k)])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def qp_solve(p: QpProblem, settings: NumericSettings = DEFAULT_SETTINGS) -> SolveResult:
    """Primal active-set method for a strictly convex QP.

    The working set starts empty at a feasible point (the unconstrained
    minimizer or the origin when feasible, else a phase-1 simplex vertex).
    Blocking constraints are added at the lowest blocking index; on a
    stationary subproblem the most negative multiplier leaves, ties broken
    by lowest constraint index.
    """
    H = _as_2d(p.H, "H")
    f = _as_1d(p.f, "f")
    n = f.size
    if H.shape != (n, n):
        raise NumericsError("H/f dimension mismatch")
    if np.max(np.abs(H - H.T)) > 1e-8 * max(1.0, np.max(np.abs(H))):
        raise NumericsError("H must be symmetric")
    G = _as_2d(p.G, "G") if p.G is not None and np.size(p.G) else np.zeros((0, n))
    h = _as_1d(p.h, "h") if p.h is not None and np.size(p.h) else np.zeros(0)
    m = G.shape[0]
    if m != h.size or (m and G.shape[1] != n):
        raise NumericsError("inconsistent QP constraint dimensions")
    A_eq = _as_2d(p.A_eq, "A_eq") if p.A_eq is not None else np.zeros((0, n))
    b_eq = _as_1d(p.b_eq, "b_eq") if p.b_eq is not None else np.zeros(0)
    n_eq = A_eq.shape[0]

    def feasible(z):
        ok = not m or np.all(G @ z <= h + settings.feas_tol)
        return ok and (not n_eq or np.max(np.abs(A_eq @ z - b_eq)) <= settings.feas_tol)

    # starting point: unconstrained minimizer, origin, or phase-1 vertex
    z = None
    if n_eq == 0:
        zu = np.linalg.solve(H, -f)
        if feasible(zu):
            val = 0.5 * zu @ H @ zu + f @ zu
            return SolveResult(SolveStatus.OPTIMAL, zu, float(val), 0, ())
        if feasible(np.zeros(n)):
            z = np.zeros(n)
    if z is None:
        res = lp_solve(LpProblem(np.zeros(n), G, h, A_eq if n_eq else None,
                                 b_eq if n_eq else None), settings)
        if res.status is not SolveStatus.OPTIMAL:
            return SolveResult(SolveStatus.INFEASIBLE, None, None, res.iterations)
        z = res.x

    work: list[int] = []
    max_iter = settings.qp_iter_factor * (n + m + n_eq)
    for it in range(max_iter):
        g = H @ z + f
        C = np.vstack([A_eq, G[work]]) if (n_eq or work) else np.zeros((0, n))
        pstep, lam = _kkt_step(H, g, C)
        if np.max(np.abs(pstep), initial=0.0) <= 1e-11:
            lam_in = lam[n_eq:]
            if lam_in.size == 0 or np.min(lam_in) >= -settings.stat_tol:
                val = 0.5 * z @ H @ z + f @ z
                return SolveResult(SolveStatus.OPTIMAL, z, float(val), it,
                                   tuple(sorted(work)))
            drop = int(np.argmin(lam_in))  # most negative; argmin takes lowest index
            work.pop(drop)
            continue
        alpha, block = 1.0, -1
        for i in range(m):
            if i in work:
                continue
            d = G[i] @ pstep
            if d > settings.pivot_tol:
                ratio = (h[i] - G[i] @ z) / d
                if ratio < alpha - 1e-12:
                    alpha, block = ratio, i
        z = z + max(alpha, 0.0) * pstep
        if block >= 0:
            work.append(block)
    return SolveResult(SolveStatus.ITER_LIMIT, z, float(0.5 * z @ H @ z + f @ z),
                       max_iter, tuple(sorted(work)))


# ---------------------------------------------------------------------------
# eigenvalues, Lyapunov and Riccati equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray  # complex, length = dimension
    converged: bool


def eig(M) -> EigenResult:
    """Eigenvalues of a small square matrix (dimension <= 8).

    2x2 inputs use the closed-form quadratic; larger ones fall back to
    LAPACK. Complex eigenvalues of real input come in conjugate pairs.
    """
    M = _as_2d(M, "M")
    if M.shape[0] != M.shape[1]:
        raise NumericsError(f"eig requires a square matrix, got {M.shape}")
    if M.shape[0] > 8:
        raise NumericsError("eig supports dimension <= 8")
    n = M.shape[0]
    if n == 1:
        return EigenResult(np.array([complex(M[0, 0])]), True)
    if n == 2:
        tr = M[0, 0] + M[1, 1]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        disc = tr * tr - 4.0 * det
        if disc >= 0.0:
            r = np.sqrt(disc)
            vals = np.array([complex((tr + r) / 2.0), complex((tr - r) / 2.0)])
        else:
            r = np.sqrt(-disc) / 2.0
            vals = np.array([complex(tr / 2.0, r), complex(tr / 2.0, -r)])
        return EigenResult(vals, True)
    try:
        vals = np.linalg.eigvals(M)
        return EigenResult(vals, True)
    except np.linalg.LinAlgError:
        return EigenResult(np.full(n, np.nan, dtype=complex), False)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(eig(M).values)))


def dlyap(A_cl, W, settings: NumericSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Solve K = A_cl' K A_cl + W by doubling the series sum_k (A')^k W A^k.

    Requires spectral radius of A_cl strictly below 1 and symmetric W.
    """
    A_cl = _as_2d(A_cl, "A_cl")
    W = _as_2d(W, "W")
    if A_cl.shape[0] != A_cl.shape[1] or A_cl.shape != W.shape:
        raise NumericsError("dlyap dimension mismatch")
    rho = spectral_radius(A_cl)
    if rho >= 1.0 - 1e-9:
        raise NumericsError(f"dlyap requires spectral radius < 1, got {rho:.6f}")
    S = W.copy()
    P = A_cl.copy()
    for _ in range(200):
        term = P.T @ S @ P
        S = S + term
        P = P @ P
        if np.max(np.abs(term)) <= 1e-16 * max(1.0, np.max(np.abs(S))):
            break
    S = 0.5 * (S + S.T)
    scale = np.max(np.abs(W))
    resid = np.max(np.abs(S - A_cl.T @ S @ A_cl - W))
    if resid > settings.lyap_rel_residual * max(scale, 1e-300):
        raise NumericsError(f"dlyap residual {resid:.3e} exceeds tolerance")
    return S


def dare(A, B, Q, R, settings: NumericSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Fixed-point iteration for K = A'(K - K B (B'KB+R)^-1 B'K) A + Q.

    Starts from K0 = Q; stops when successive iterates agree to
    `riccati_step_tol` in the max norm.
    """
    A = _as_2d(A, "A")
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = _as_2d(Q, "Q")
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K = Q.copy()
    for it in range(settings.riccati_max_iter):
        M = B.T @ K @ B + R
        Kn = A.T @ (K - K @ B @ np.linalg.solve(M, B.T @ K)) @ A + Q
        Kn = 0.5 * (Kn + Kn.T)
        if np.max(np.abs(Kn - K)) <= settings.riccati_step_tol:
            K = Kn
            break
        K = Kn
    else:
        raise NumericsError("dare did not converge within the iteration budget")
    resid = np.max(np.abs(
        A.T @ (K - K @ B @ np.linalg.solve(B.T @ K @ B + R, B.T @ K)) @ A + Q - K))
    if resid > settings.riccati_residual:
        raise NumericsError(f"dare residual {resid:.3e} exceeds tolerance")
    return K


def riccati_gain(A, B, K, R) -> np.ndarray:
    """L = -(B'KB + R)^-1 B'K A, the policy induced by a Riccati solution."""
    A = _as_2d(A, "A")
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return -np.linalg.solve(B.T @ K @ B + R, B.T @ K @ A)
