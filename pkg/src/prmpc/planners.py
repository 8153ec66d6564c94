"""Finite-horizon lookahead solvers for one rollout unit.

A unit's problem is condensed into control variables only: states are
eliminated through x_k = Phi_k x0 + Gamma_k z, state/terminal polytope rows
become rows in control space, and norm stage costs are lifted with epigraph
variables. Discontinuous variants enumerate per-stage branches (sign
patterns for the piecewise dynamics, mode words for switched dynamics) and
take the minimum over consistent convex programs.

Prepared condensers cache everything that does not depend on the initial
state, so closed-loop simulations and grid scans pay one small QP/LP per
(state, branch) with no re-assembly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import Polytope, SublevelSet
from .model import (INF, ControlModel, ExtendedCost, LinearNormModel,
                    LinearQuadraticModel, NormValue, PiecewiseAffineModel,
                    QuadraticValue, SwitchedModel, TerminalIngredient)
from .numerics import (DEFAULT_SETTINGS, LpProblem, NumericSettings,
                       QpProblem, SolveStatus, lp_solve, qp_solve)

FREE = "free"
ELLIPSOID_CUT_LIMIT = 30
ELLIPSOID_VIOLATION_TOL = 1e-7
REPLAY_RTOL = 1e-6
REPLAY_FEAS_TOL = 1e-8


class PlannerError(ValueError):
    pass


@dataclass(frozen=True)
class RolloutUnitSpec:
    """One computational unit: lookahead depth, terminal ingredient, and an
    optional per-stage mode restriction for switched dynamics."""

    label: str
    horizon: int
    terminal: TerminalIngredient
    mode_schedule: tuple | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise PlannerError("unit horizon must be >= 1")
        if self.mode_schedule is not None and len(self.mode_schedule) != self.horizon:
            raise PlannerError("mode schedule length must equal the horizon")


@dataclass(frozen=True)
class LookaheadProblem:
    model: ControlModel
    horizon: int
    terminal: TerminalIngredient
    x0: np.ndarray
    mode_schedule: tuple | None = None


@dataclass
class PlannerSolution:
    value: ExtendedCost
    controls: np.ndarray | None
    modes: tuple | None
    status: str            # optimal | infeasible | iter_limit
    certified: bool        # replay matched the value and all constraints
    program_count: int = 0
    replay_gap: float | None = None

    @property
    def feasible(self) -> bool:
        return self.value < INF


def _prediction(A_seq, B_seq):
    """Phi_k, Gamma_k with x_k = Phi_k x0 + Gamma_k z for stacked controls z."""
    ell = len(A_seq)
    n = A_seq[0].shape[0]
    Phi = [np.eye(n)]
    Gam = [np.zeros((n, ell))]
    for k in range(ell):
        Phi.append(A_seq[k] @ Phi[k])
        G = A_seq[k] @ Gam[k]
        G[:, k] = B_seq[k][:, 0]
        Gam.append(G)
    return Phi, Gam


def _stage_matrices(model, horizon, pattern=None, modes=None):
    """Per-stage (A_k, B_k) for a concrete branch of the dynamics."""
    if isinstance(model, LinearQuadraticModel) or isinstance(model, LinearNormModel):
        return [model.A] * horizon, [model.B] * horizon
    if isinstance(model, PiecewiseAffineModel):
        A_seq = [model.A_pos if s > 0 else model.A_neg for s in pattern]
        return A_seq, [model.B] * horizon
    if isinstance(model, SwitchedModel):
        A_seq = [model.A_list[d - 1] for d in modes]
        B_seq = [model.B_list[d - 1] for d in modes]
        return A_seq, B_seq
    raise PlannerError(f"unsupported model variant {model.variant!r}")


class _CondensedBase:
    """Rows G z <= h0 + W x0 shared by the quadratic and epigraph forms."""

    def __init__(self, model, horizon, terminal, settings, pattern=None, modes=None):
        self.model = model
        self.horizon = horizon
        self.terminal = terminal
        self.settings = settings
        self.pattern = pattern
        self.modes = modes
        A_seq, B_seq = _stage_matrices(model, horizon, pattern, modes)
        self.Phi, self.Gam = _prediction(A_seq, B_seq)
        self.n = A_seq[0].shape[0]

    def _collect_rows(self, nz, upad=0):
        """Constraint rows over z = [controls, extras]; extras get zero blocks."""
        ell = self.horizon
        G_rows, h_rows, W_rows = [], [], []

        def add(Gz, h0, Wx):
            G_rows.append(Gz)
            h_rows.append(h0)
            W_rows.append(Wx)

        cset = self.model.control_set
        if cset is not None:
            for k in range(ell):
                for row, rhs in zip(cset.H, cset.h):
                    g = np.zeros(nz)
                    g[k] = row[0]
                    add(g, rhs, np.zeros(self.n))
        sset = self.model.state_set
        if sset is not None:
            for k in range(1, ell):
                Gk = sset.H @ self.Gam[k]
                Wk = -sset.H @ self.Phi[k]
                for i in range(sset.num_rows):
                    g = np.zeros(nz)
                    g[:ell] = Gk[i]
                    add(g, sset.h[i], Wk[i])
        if self.pattern is not None:
            # branch membership for the interior stages; stage 0 is checked
            # against x0 directly at solve time
            for k in range(1, ell):
                s = self.pattern[k]
                g = np.zeros(nz)
                g[:ell] = -s * self.Gam[k][0]
                add(g, 0.0, s * self.Phi[k][0])
        region = self.terminal.region
        if isinstance(region, Polytope):
            GT = region.H @ self.Gam[ell]
            WT = -region.H @ self.Phi[ell]
            for i in range(region.num_rows):
                g = np.zeros(nz)
                g[:ell] = GT[i]
                add(g, region.h[i], WT[i])
        if G_rows:
            return np.vstack(G_rows), np.array(h_rows), np.vstack(W_rows)
        return np.zeros((0, nz)), np.zeros(0), np.zeros((0, self.n))

    def _branch_ok(self, x0) -> bool:
        if self.pattern is None:
            return True
        s0 = 1 if x0[0] >= 0.0 else -1
        return s0 == self.pattern[0]


class CondensedQuadratic(_CondensedBase):
    """ell-step problem with quadratic stage and terminal costs as one QP."""

    def __init__(self, model, horizon, terminal, settings, pattern=None, modes=None):
        if not isinstance(terminal.value, QuadraticValue):
            raise PlannerError("unsupported variant combination: "
                               "quadratic stage cost needs a quadratic terminal")
        super().__init__(model, horizon, terminal, settings, pattern, modes)
        ell = horizon
        Q, R, K = model.Q, model.R, terminal.value.K
        H = np.zeros((ell, ell))
        F = np.zeros((ell, self.n))
        P0 = Q.copy()
        for k in range(1, ell + 1):
            Qk = Q if k < ell else K
            H += self.Gam[k].T @ Qk @ self.Gam[k]
            F += self.Gam[k].T @ Qk @ self.Phi[k]
            P0 += self.Phi[k].T @ Qk @ self.Phi[k]
        H += R * np.eye(ell)
        self.H = 2.0 * H
        self.F = 2.0 * F
        self.P0 = P0
        self.G, self.h0, self.W = self._collect_rows(ell)
        self.ellipsoid = terminal.region if isinstance(terminal.region, SublevelSet) else None

    def solve(self, x0):
        x0 = np.asarray(x0, dtype=float)
        if not self.model.state_feasible(x0) or not self._branch_ok(x0):
            return None
        f = self.F @ x0
        h = self.h0 + self.W @ x0
        const = float(x0 @ self.P0 @ x0)
        G, hh = self.G, h
        cuts = 0
        while True:
            res = qp_solve(QpProblem(self.H, f, G, hh), self.settings)
            if res.status is SolveStatus.INFEASIBLE:
                return None
            if res.status is SolveStatus.UNBOUNDED:
                raise PlannerError("condensed QP cannot be unbounded")
            z = res.x
            if self.ellipsoid is None:
                break
            xe = self.Phi[self.horizon] @ x0 + self.Gam[self.horizon] @ z
            level = float(xe @ self.ellipsoid.K @ xe)
            if level <= self.ellipsoid.alpha + ELLIPSOID_VIOLATION_TOL:
                break
            if cuts >= ELLIPSOID_CUT_LIMIT:
                # accept the last iterate but flag it downstream
                res = SolveResultFlag(res)
                break
            # supporting halfspace of the sublevel set at the radial projection
            y = xe * np.sqrt(self.ellipsoid.alpha / level)
            normal = self.ellipsoid.K @ y
            g = np.zeros(G.shape[1])
            g[:self.horizon] = normal @ self.Gam[self.horizon]
            G = np.vstack([G, g])
            hh = np.append(hh, self.ellipsoid.alpha - normal @ (self.Phi[self.horizon] @ x0))
            cuts += 1
        value = res.value + const
        clean = res.status is SolveStatus.OPTIMAL and not isinstance(res, SolveResultFlag)
        return value, z, clean


class SolveResultFlag:
    """Wrapper marking an accepted-but-uncertified solver outcome."""

    def __init__(self, res):
        self.status = res.status
        self.x = res.x
        self.value = res.value


class CondensedNorm(_CondensedBase):
    """ell-step problem with norm stage costs as one epigraph LP.

    One epigraph variable per absolute-value term for the 1-norm, one per
    max for the infinity norm, one per stage for the |R u| term, plus the
    terminal block for ||K x_ell||_p.
    """

    def __init__(self, model, horizon, terminal, settings, pattern=None, modes=None):
        if not isinstance(terminal.value, NormValue):
            raise PlannerError("unsupported variant combination: "
                               "norm stage cost needs a norm terminal")
        if isinstance(terminal.region, SublevelSet):
            raise PlannerError("unsupported variant combination: "
                               "norm problems use polytopic terminal regions")
        super().__init__(model, horizon, terminal, settings, pattern, modes)
        ell = horizon
        Q, p = model.Q, model.p
        Kt, pt = terminal.value.K, terminal.value.p
        nq = Q.shape[0]
        mt = Kt.shape[0]

        cols = ell
        self.state_vars = []
        for k in range(1, ell):
            if p == 1:
                self.state_vars.append(list(range(cols, cols + nq)))
                cols += nq
            else:
                self.state_vars.append([cols])
                cols += 1
        self.input_vars = list(range(cols, cols + ell))
        cols += ell
        if pt == 1:
            self.term_vars = list(range(cols, cols + mt))
            cols += mt
        else:
            self.term_vars = [cols]
            cols += 1
        self.nz = cols

        c = np.zeros(cols)
        for vs in self.state_vars:
            c[vs] = 1.0
        c[self.input_vars] = 1.0
        c[self.term_vars] = 1.0
        self.c = c

        G, h0, W = self._collect_rows(cols)
        rows_G, rows_h, rows_W = [G], [h0], [W]

        def add(g, h, w):
            rows_G.append(g[None, :])
            rows_h.append(np.array([h]))
            rows_W.append(w[None, :])

        for k in range(1, ell):
            QG = Q @ self.Gam[k]
            QP = Q @ self.Phi[k]
            for r in range(nq):
                var = self.state_vars[k - 1][r if p == 1 else 0]
                for sgn in (1.0, -1.0):
                    g = np.zeros(cols)
                    g[:ell] = sgn * QG[r]
                    g[var] = -1.0
                    add(g, 0.0, -sgn * QP[r])
        R = model.R
        for k in range(ell):
            for sgn in (1.0, -1.0):
                g = np.zeros(cols)
                g[k] = sgn * R
                g[self.input_vars[k]] = -1.0
                add(g, 0.0, np.zeros(self.n))
        KG = Kt @ self.Gam[ell]
        KP = Kt @ self.Phi[ell]
        for r in range(mt):
            var = self.term_vars[r if pt == 1 else 0]
            for sgn in (1.0, -1.0):
                g = np.zeros(cols)
                g[:ell] = sgn * KG[r]
                g[var] = -1.0
                add(g, 0.0, -sgn * KP[r])
        self.G = np.vstack(rows_G)
        self.h0 = np.concatenate(rows_h)
        self.W = np.vstack(rows_W)

    def solve(self, x0):
        x0 = np.asarray(x0, dtype=float)
        if not self.model.state_feasible(x0) or not self._branch_ok(x0):
            return None
        h = self.h0 + self.W @ x0
        res = lp_solve(LpProblem(self.c, self.G, h), self.settings)
        if res.status is not SolveStatus.OPTIMAL:
            if res.status is SolveStatus.INFEASIBLE:
                return None
            raise PlannerError(f"norm LP ended with status {res.status}")
        v = self.model.Q @ x0
        const = float(np.abs(v).sum() if self.model.p == 1 else np.abs(v).max())
        return res.value + const, res.x[:self.horizon], True


# ---------------------------------------------------------------------------
# prepared units and the public solve surface
# ---------------------------------------------------------------------------

def _branches(model, spec: RolloutUnitSpec):
    """Concrete (pattern, modes) branches in deterministic enumeration order."""
    if isinstance(model, PiecewiseAffineModel):
        pats = itertools.product((1, -1), repeat=spec.horizon)
        return [(tuple(p), None) for p in pats]
    if isinstance(model, SwitchedModel):
        schedule = spec.mode_schedule or (FREE,) * spec.horizon
        options = [range(1, model.num_modes + 1) if s == FREE else (int(s),)
                   for s in schedule]
        return [(None, tuple(m)) for m in itertools.product(*options)]
    return [(None, None)]


class PreparedUnit:
    """All condensed branches of one unit, reusable across initial states."""

    def __init__(self, model, spec: RolloutUnitSpec,
                 settings: NumericSettings = DEFAULT_SETTINGS):
        self.model = model
        self.spec = spec
        self.settings = settings
        cond = CondensedNorm if isinstance(model, LinearNormModel) else CondensedQuadratic
        self.branches = [
            (pattern, modes,
             cond(model, spec.horizon, spec.terminal, settings, pattern, modes))
            for pattern, modes in _branches(model, spec)
        ]
        self.programs_solved = 0

    def solve(self, x0) -> PlannerSolution:
        x0 = np.asarray(x0, dtype=float)
        candidates = []
        count = 0
        for pattern, modes, cond in self.branches:
            if not cond._branch_ok(x0):
                continue
            count += 1
            out = cond.solve(x0)
            if out is None:
                continue
            value, z, clean = out
            controls = np.asarray(z[:self.spec.horizon], dtype=float)
            replay, feas = self._replay(x0, controls, modes)
            gap = abs(replay - value) if feas else INF
            consistent = feas and gap <= REPLAY_RTOL * max(1.0, abs(value))
            candidates.append((value, controls, modes, clean, consistent, gap))
        self.programs_solved += count
        if not candidates:
            return PlannerSolution(ExtendedCost(INF), None, None, "infeasible",
                                   True, count, None)
        consistent_pool = [c for c in candidates if c[4]] or candidates
        best = min(consistent_pool, key=lambda c: c[0])
        value, controls, modes, clean, consistent, gap = best
        status = "optimal" if clean else "iter_limit"
        return PlannerSolution(ExtendedCost(max(value, 0.0)), controls, modes,
                               status, clean and consistent, count, gap)

    def _replay(self, x0, controls, modes):
        """Re-simulate through the true dynamics at solver feasibility tolerance.

        Returns (value, feasible). Constraint membership is checked at 1e-8
        (matching the QP/LP feasibility tolerance, looser than the models'
        1e-9 indicator) so a clean solver answer is never rejected for
        round-off on an active constraint.
        """
        model, terminal = self.model, self.spec.terminal
        x = x0
        total = 0.0
        for k, u in enumerate(controls):
            uu = (float(u), modes[k]) if isinstance(model, SwitchedModel) else float(u)
            ok = ((model.state_set is None or model.state_set.contains(x, REPLAY_FEAS_TOL))
                  and (model.control_set is None
                       or model.control_set.contains(np.atleast_1d(float(u)), REPLAY_FEAS_TOL)))
            if not ok:
                return INF, False
            total += model.raw_cost(x, uu)
            x = model.f(x, uu)
        tol = REPLAY_FEAS_TOL
        if isinstance(terminal.region, SublevelSet):
            tol = ELLIPSOID_VIOLATION_TOL * 10
        if not terminal.member(x, tol):
            return INF, False
        total += max(terminal.value(x), 0.0)
        return total, True


def prepare_unit(model, spec, settings=DEFAULT_SETTINGS) -> PreparedUnit:
    return PreparedUnit(model, spec, settings)


def condense(problem: LookaheadProblem, settings: NumericSettings = DEFAULT_SETTINGS):
    """Condense one concrete-branch problem to its QP or LP.

    Free mode slots are rejected here; `solve_unit` owns the enumeration.
    Returns (kind, program, condenser) with kind in {"qp", "lp"}.
    """
    model = problem.model
    if isinstance(model, SwitchedModel):
        schedule = problem.mode_schedule
        if schedule is None or any(s == FREE for s in schedule):
            raise PlannerError("condense needs a fully fixed mode schedule")
        modes, pattern = tuple(int(s) for s in schedule), None
    elif isinstance(model, PiecewiseAffineModel):
        schedule = problem.mode_schedule
        if schedule is None:
            raise PlannerError("condense needs a sign pattern for piecewise dynamics")
        modes, pattern = None, tuple(schedule)
    else:
        modes = pattern = None
    if isinstance(model, LinearNormModel):
        cond = CondensedNorm(model, problem.horizon, problem.terminal, settings,
                             pattern, modes)
        h = cond.h0 + cond.W @ np.asarray(problem.x0, dtype=float)
        return "lp", LpProblem(cond.c, cond.G, h), cond
    cond = CondensedQuadratic(model, problem.horizon, problem.terminal, settings,
                              pattern, modes)
    x0 = np.asarray(problem.x0, dtype=float)
    return "qp", QpProblem(cond.H, cond.F @ x0, cond.G, cond.h0 + cond.W @ x0), cond


def solve_unit(problem: LookaheadProblem,
               settings: NumericSettings = DEFAULT_SETTINGS) -> PlannerSolution:
    spec = RolloutUnitSpec("unit", problem.horizon, problem.terminal,
                           problem.mode_schedule)
    return PreparedUnit(problem.model, spec, settings).solve(problem.x0)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------

def _control_bounds(model):
    if model.control_set is None:
        return -1.0, 1.0
    lo, hi = model.control_set.bounding_box()
    return float(lo[0]), float(hi[0])


def grid_oracle(problem: LookaheadProblem, resolution: float) -> PlannerSolution:
    """Exhaustive control-grid minimization for scalar-control problems.

    Simulates the true dynamics (so piecewise switching needs no branch
    bookkeeping) over every control word on the grid; the final stage is
    vectorized. Intended for horizons <= 3 in tests.
    """
    model, terminal = problem.model, problem.terminal
    ell = problem.horizon
    x0 = np.asarray(problem.x0, dtype=float)
    lo, hi = _control_bounds(model)
    N = int(round((hi - lo) / resolution))
    grid = lo + resolution * np.arange(N + 1)

    if isinstance(model, SwitchedModel):
        schedule = problem.mode_schedule or (FREE,) * ell
        options = [range(1, model.num_modes + 1) if s == FREE else (int(s),)
                   for s in schedule]
        mode_words = list(itertools.product(*options))
    else:
        mode_words = [None]

    if not model.state_feasible(x0):
        return PlannerSolution(ExtendedCost(INF), None, None, "infeasible", True, 0)

    best_val, best_u, best_modes = INF, None, None
    sset = model.state_set
    for modes in mode_words:
        for prefix in itertools.product(grid, repeat=ell - 1):
            x = x0
            acc = 0.0
            feasible = True
            for k, u in enumerate(prefix):
                uu = (float(u), modes[k]) if modes else float(u)
                g = model.stage_cost(x, uu)
                if g == INF:
                    feasible = False
                    break
                acc += g
                x = model.f(x, uu)
            if not feasible:
                continue
            # last stage vectorized over the control grid
            if sset is not None and not model.state_feasible(x):
                continue
            k = ell - 1
            if isinstance(model, SwitchedModel):
                d = modes[k]
                A, B = model.A_list[d - 1], model.B_list[d - 1]
            elif isinstance(model, PiecewiseAffineModel):
                A, B = model.A_of(x), model.B
            else:
                A, B = model.A, model.B
            Xn = (A @ x)[:, None] + B[:, :1] * grid[None, :]
            if isinstance(model, LinearNormModel):
                v = model.Q @ x
                gx = np.abs(v).sum() if model.p == 1 else np.abs(v).max()
                gu = np.abs(model.R * grid)
            else:
                gx = float(x @ model.Q @ x)
                gu = model.R * grid ** 2
            stage = gx + gu
            if isinstance(terminal.value, QuadraticValue):
                tv = np.einsum("in,ij,jn->n", Xn, terminal.value.K, Xn)
            else:
                KX = terminal.value.K @ Xn
                tv = (np.abs(KX).sum(axis=0) if terminal.value.p == 1
                      else np.abs(KX).max(axis=0))
            total = acc + stage + np.maximum(tv, 0.0)
            if terminal.region is not None:
                mask = terminal.region.contains_many(Xn.T)
                total = np.where(mask, total, INF)
            idx = int(np.argmin(total))
            if total[idx] < best_val:
                best_val = float(total[idx])
                best_u = np.array(list(prefix) + [grid[idx]])
                best_modes = modes
    if best_val == INF:
        return PlannerSolution(ExtendedCost(INF), None, None, "infeasible", True,
                               len(mode_words))
    return PlannerSolution(ExtendedCost(best_val), best_u, best_modes, "optimal",
                           True, len(mode_words))
