"""Extended-valued costs, control models, policies and terminal ingredients.

Costs live in [0, +inf]; +inf encodes infeasibility, so hard state and
control constraints are folded into the stage cost through set indicators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polytope, SublevelSet

INF = math.inf
MEMBERSHIP_TOL = 1e-9


class ExtendedCost(float):
    """A nonnegative extended real. Addition saturates at +inf."""

    def __new__(cls, value):
        v = float(value)
        if math.isnan(v):
            raise ValueError("cost cannot be NaN")
        if v < 0.0:
            raise ValueError(f"cost cannot be negative, got {v}")
        return super().__new__(cls, v)

    def __add__(self, other):
        return ExtendedCost(float(self) + float(other))

    __radd__ = __add__


# ---------------------------------------------------------------------------
# control models
# ---------------------------------------------------------------------------

class ControlModel:
    """Dynamics f(x,u), stage cost g(x,u) and constraint data.

    Subclasses fix the variant: finite graphs live in `finite_dp`; the
    continuous variants below share polytopic state/control sets whose
    violation drives g to +inf.
    """

    variant = "abstract"
    state_dim = None

    def f(self, x, u):
        raise NotImplementedError

    def stage_cost(self, x, u) -> float:
        raise NotImplementedError

    def state_feasible(self, x) -> bool:
        raise NotImplementedError


class _ConstrainedModel(ControlModel):
    def __init__(self, state_set: Polytope | None, control_set: Polytope | None):
        self.state_set = state_set
        self.control_set = control_set

    def state_feasible(self, x) -> bool:
        return self.state_set is None or self.state_set.contains(x, MEMBERSHIP_TOL)

    def control_feasible(self, u) -> bool:
        if self.control_set is None:
            return True
        return self.control_set.contains(np.atleast_1d(float(u)), MEMBERSHIP_TOL)

    def _indicator(self, x, u) -> float:
        return 0.0 if (self.state_feasible(x) and self.control_feasible(u)) else INF


class LinearQuadraticModel(_ConstrainedModel):
    """x+ = Ax + Bu, g = x'Qx + R u^2 (+ constraint indicator)."""

    variant = "linear_quadratic"

    def __init__(self, A, B, Q, R, state_set=None, control_set=None):
        super().__init__(state_set, control_set)
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = float(np.asarray(R).reshape(()))
        self.state_dim = self.A.shape[0]

    def f(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B[:, 0] * float(u)

    def raw_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x + self.R * float(u) ** 2)

    def stage_cost(self, x, u):
        if self._indicator(x, u) == INF:
            return INF
        return self.raw_cost(x, u)


class LinearNormModel(_ConstrainedModel):
    """x+ = Ax + Bu, g = ||Qx||_p + |R u| with p in {1, inf}."""

    variant = "linear_norm"

    def __init__(self, A, B, Q, R, p, state_set=None, control_set=None):
        super().__init__(state_set, control_set)
        if p not in (1, INF):
            raise ValueError("norm model supports p in {1, inf}")
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = float(np.asarray(R).reshape(()))
        self.p = p
        self.state_dim = self.A.shape[0]

    def f(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B[:, 0] * float(u)

    def raw_cost(self, x, u):
        v = self.Q @ np.asarray(x, dtype=float)
        nrm = np.abs(v).sum() if self.p == 1 else np.abs(v).max()
        return float(nrm + abs(self.R * float(u)))

    def stage_cost(self, x, u):
        if self._indicator(x, u) == INF:
            return INF
        return self.raw_cost(x, u)


class PiecewiseAffineModel(_ConstrainedModel):
    """Mode keyed on the sign of x_1: x+ = A_pos x + Bu when x_1 >= 0, else A_neg."""

    variant = "piecewise_affine"

    def __init__(self, A_pos, A_neg, B, Q, R, state_set=None, control_set=None):
        super().__init__(state_set, control_set)
        self.A_pos = np.atleast_2d(np.asarray(A_pos, dtype=float))
        self.A_neg = np.atleast_2d(np.asarray(A_neg, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A_pos.shape[0], -1)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = float(np.asarray(R).reshape(()))
        self.state_dim = self.A_pos.shape[0]

    def mode_of(self, x) -> int:
        return 0 if float(np.asarray(x).reshape(-1)[0]) >= 0.0 else 1

    def A_of(self, x):
        return self.A_pos if self.mode_of(x) == 0 else self.A_neg

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        return self.A_of(x) @ x + self.B[:, 0] * float(u)

    def raw_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x + self.R * float(u) ** 2)

    def stage_cost(self, x, u):
        if self._indicator(x, u) == INF:
            return INF
        return self.raw_cost(x, u)


class SwitchedModel(_ConstrainedModel):
    """u = (v, d): continuous input v plus a mode choice d in 1..num_modes."""

    variant = "switched"

    def __init__(self, A_list, B_list, Q, R, state_set=None, control_set=None):
        super().__init__(state_set, control_set)
        self.A_list = [np.atleast_2d(np.asarray(A, dtype=float)) for A in A_list]
        self.B_list = [np.asarray(B, dtype=float).reshape(self.A_list[0].shape[0], -1)
                       for B in B_list]
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = float(np.asarray(R).reshape(()))
        self.state_dim = self.A_list[0].shape[0]

    @property
    def num_modes(self) -> int:
        return len(self.A_list)

    def f(self, x, u):
        v, d = u
        return self.A_list[d - 1] @ np.asarray(x, dtype=float) + self.B_list[d - 1][:, 0] * float(v)

    def raw_cost(self, x, u):
        v, _ = u
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x + self.R * float(v) ** 2)

    def stage_cost(self, x, u):
        v, d = u
        if not (1 <= d <= self.num_modes):
            return INF
        if not (self.state_feasible(x) and self.control_feasible(v)):
            return INF
        return self.raw_cost(x, u)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class LinearPolicy:
    def __init__(self, L):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))

    def __call__(self, x):
        return float((self.L @ np.asarray(x, dtype=float)).item())


class PiecewiseLinearPolicy:
    """Gain keyed on sign of x_1, matching the piecewise-affine dynamics."""

    def __init__(self, L_pos, L_neg):
        self.L_pos = np.atleast_2d(np.asarray(L_pos, dtype=float))
        self.L_neg = np.atleast_2d(np.asarray(L_neg, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        L = self.L_pos if x[0] >= 0.0 else self.L_neg
        return float((L @ x).item())


class SwitchedPolicy:
    """Fixed-mode policy (L x, mode) for a switched model."""

    def __init__(self, L, mode):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.mode = int(mode)

    def __call__(self, x):
        return (float((self.L @ np.asarray(x, dtype=float)).item()), self.mode)


class TablePolicy:
    """Explicit state -> control map for finite models."""

    def __init__(self, table):
        self.table = dict(table)

    def __call__(self, x):
        return self.table[x]


# ---------------------------------------------------------------------------
# terminal ingredients
# ---------------------------------------------------------------------------

class QuadraticValue:
    degree = 2

    def __init__(self, K):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return float(x @ self.K @ x)

    def to_dict(self):
        return {"type": "quadratic", "K": self.K.tolist()}


class NormValue:
    degree = 1

    def __init__(self, K, p):
        if p not in (1, INF):
            raise ValueError("norm value supports p in {1, inf}")
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.p = p

    def __call__(self, x):
        v = self.K @ np.asarray(x, dtype=float)
        return float(np.abs(v).sum() if self.p == 1 else np.abs(v).max())

    def to_dict(self):
        return {"type": "norm", "K": self.K.tolist(),
                "p": "inf" if self.p == INF else 1}


def value_from_dict(d):
    if d["type"] == "quadratic":
        return QuadraticValue(d["K"])
    if d["type"] == "norm":
        return NormValue(d["K"], INF if d["p"] == "inf" else 1)
    raise ValueError(f"unknown value type {d['type']!r}")


@dataclass
class TerminalIngredient:
    """J(x) = V(x) + indicator of S; S = None means the whole space."""

    value: QuadraticValue | NormValue
    region: Polytope | SublevelSet | None = None

    def member(self, x, tol=MEMBERSHIP_TOL) -> bool:
        return self.region is None or self.region.contains(x, tol)

    def __call__(self, x) -> ExtendedCost:
        if not self.member(x):
            return ExtendedCost(INF)
        return ExtendedCost(max(self.value(x), 0.0))

    def to_dict(self):
        d = {"value": self.value.to_dict()}
        if self.region is None:
            d["region"] = None
        else:
            tag = "polytope" if isinstance(self.region, Polytope) else "sublevel"
            d["region"] = {"type": tag, **self.region.to_dict()}
        return d

    @classmethod
    def from_dict(cls, d):
        region = d.get("region")
        if region is not None:
            if region["type"] == "polytope":
                region = Polytope(region["H"], region["h"])
            elif region["type"] == "sublevel":
                region = SublevelSet(region["K"], region["alpha"])
            else:
                raise ValueError(f"unknown region type {region['type']!r}")
        return cls(value_from_dict(d["value"]), region)


# ---------------------------------------------------------------------------
# policy cost, region of decreasing, pointwise minimum
# ---------------------------------------------------------------------------

STEP_CAP = 10_000
CONVERGED_COST = 1e-9
CONVERGED_NORM = 1e-6
TAIL_WINDOW = 100
TAIL_BUDGET = 1e-6


@dataclass
class PolicyCostResult:
    value: ExtendedCost
    steps: int
    termination: str  # converged | infeasible | cap_contracted | cap_diverged


def evaluate_policy_cost(model: ControlModel, policy, x0,
                         step_cap: int = STEP_CAP) -> PolicyCostResult:
    """Accumulate stage costs along the closed loop x+ = f(x, mu(x)).

    Declares convergence when the stage cost drops below 1e-9 and the state
    is at the origin (vector states) or absorbing (discrete states). A +inf
    stage cost ends the run with value +inf. At the step cap the run counts
    as converged only when the last 100 stage costs sum below 1e-6.
    """
    x = x0
    total = 0.0
    tail = []
    for k in range(step_cap):
        u = policy(x)
        g = model.stage_cost(x, u)
        if g == INF:
            return PolicyCostResult(ExtendedCost(INF), k, "infeasible")
        x_next = model.f(x, u)
        total += g
        tail.append(g)
        if len(tail) > TAIL_WINDOW:
            tail.pop(0)
        if g < CONVERGED_COST:
            if isinstance(x_next, np.ndarray):
                if float(np.linalg.norm(x_next)) < CONVERGED_NORM:
                    return PolicyCostResult(ExtendedCost(total), k + 1, "converged")
            elif x_next == x:
                return PolicyCostResult(ExtendedCost(total), k + 1, "converged")
        x = x_next
    if sum(tail) > TAIL_BUDGET:
        return PolicyCostResult(ExtendedCost(INF), step_cap, "cap_diverged")
    return PolicyCostResult(ExtendedCost(total), step_cap, "cap_contracted")


@dataclass
class DecreaseReport:
    passed: bool
    max_violation: float   # max over probes of (TJ)(x) - J(x); -inf if all slack
    worst_probe: object
    probes: int
    tol: float

    def __str__(self):
        tag = "pass" if self.passed else "FAIL"
        return (f"decrease certificate: {tag} "
                f"(max violation {self.max_violation:.3e} over {self.probes} probes)")


def check_region_of_decreasing(J, one_step, probes, tol=1e-7) -> DecreaseReport:
    """Certify (TJ)(x) <= J(x) + tol over the probe states.

    `J` and `one_step` are evaluators returning values in [0, inf]; the
    caller supplies the exact one-step operator for the model variant
    (finite enumeration or a horizon-1 planner). Probes where J is +inf
    hold trivially; a finite TJ there contributes -inf violation.
    """
    worst = -INF
    worst_x = None
    count = 0
    for x in probes:
        count += 1
        jx = float(J(x))
        tjx = float(one_step(x))
        if jx == INF:
            violation = 0.0 if tjx == INF else -INF
        elif tjx == INF:
            violation = INF
        else:
            violation = tjx - jx
        if violation > worst:
            worst, worst_x = violation, x
    return DecreaseReport(worst <= tol, worst, worst_x, count, tol)


class PointwiseMin:
    """Pointwise minimum of unit evaluators with lowest-index argmin."""

    def __init__(self, evaluators):
        if not evaluators:
            raise ValueError("need at least one evaluator")
        self.evaluators = list(evaluators)

    def values(self, x):
        return [float(J(x)) for J in self.evaluators]

    def argmin(self, x):
        """(min value, all argmin indices, lowest argmin index); 0-based."""
        vals = self.values(x)
        best = min(vals)
        idxs = [i for i, v in enumerate(vals) if v == best]
        return best, idxs, idxs[0]

    def __call__(self, x) -> ExtendedCost:
        return ExtendedCost(min(self.values(x)))
