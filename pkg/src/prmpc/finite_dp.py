"""Exact one-step improvement machinery on enumerated state/control spaces.

Tables map states to values in [0, inf]; with integer edge costs every
operation below is exact, which is what the equality-style property tests
rely on.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

from .model import INF, ControlModel


class FiniteModelError(ValueError):
    pass


@dataclass
class FiniteModel(ControlModel):
    """Deterministic transition graph with per-state control menus.

    controls[x] lists the admissible controls at x in a fixed order (the
    order defines the lowest-index tie-break); step[(x, u)] is the next
    state and cost[(x, u)] the nonnegative stage cost.
    """

    states: list
    controls: dict
    step: dict
    cost: dict

    variant = "finite"

    def __post_init__(self):
        for x in self.states:
            menu = self.controls.get(x)
            if not menu:
                raise FiniteModelError(f"state {x!r} has an empty control menu")
            for u in menu:
                if (x, u) not in self.step:
                    raise FiniteModelError(f"missing transition for ({x!r}, {u!r})")
                c = self.cost[(x, u)]
                if not (c >= 0):
                    raise FiniteModelError(f"negative cost at ({x!r}, {u!r})")
                if self.step[(x, u)] not in set(self.states):
                    raise FiniteModelError(f"transition ({x!r}, {u!r}) leaves the state space")

    def f(self, x, u):
        return self.step[(x, u)]

    def stage_cost(self, x, u):
        return self.cost[(x, u)]

    def state_feasible(self, x):
        return x in set(self.states)

    def zero_absorbing_states(self):
        return [x for x in self.states
                if any(self.step[(x, u)] == x and self.cost[(x, u)] == 0
                       for u in self.controls[x])]

    @classmethod
    def from_edges(cls, edges):
        """Build from (from_state, control, to_state, cost) records."""
        states, controls, step, cost = [], {}, {}, {}
        for frm, u, to, c in edges:
            for s in (frm, to):
                if s not in controls:
                    controls[s] = []
                    states.append(s)
            controls[frm].append(u)
            step[(frm, u)] = to
            cost[(frm, u)] = c
        return cls(states, controls, step, cost)


def zero_table(model: FiniteModel) -> dict:
    return {x: 0 for x in model.states}


def _validate_table(model, J):
    for x in model.states:
        if x not in J:
            raise FiniteModelError(f"table missing state {x!r}")
        if not (J[x] >= 0):
            raise FiniteModelError(f"negative table value at {x!r}")


def bellman(model: FiniteModel, J: dict):
    """One exact improvement sweep.

    Returns (TJ, argmin_sets, representatives): argmin_sets[x] is the full
    set of minimizing controls, representatives[x] the lowest-index one.
    """
    return bellman_restricted(model, J, model.controls)


def bellman_restricted(model: FiniteModel, J: dict, restricted: dict):
    """Sweep with the minimization restricted to restricted[x] per state."""
    _validate_table(model, J)
    TJ, argmins, reps = {}, {}, {}
    for x in model.states:
        menu = restricted[x]
        if not menu:
            raise FiniteModelError(f"restricted control set empty at {x!r}")
        best, best_set, rep = INF, [], None
        for u in menu:
            q = model.cost[(x, u)] + J[model.step[(x, u)]]
            if q < best:
                best, best_set, rep = q, [u], u
            elif q == best:
                best_set.append(u)
                if rep is None:
                    rep = u
        TJ[x], argmins[x], reps[x] = best, best_set, rep
    return TJ, argmins, reps


def bellman_table(model: FiniteModel, J: dict) -> dict:
    return bellman(model, J)[0]


def apply_bellman(model: FiniteModel, J: dict, times: int) -> dict:
    for _ in range(times):
        J = bellman(model, J)[0]
    return J


def exact_policy_cost(model: FiniteModel, policy) -> dict:
    """Exact closed-loop cost per start state by trajectory following.

    Each trajectory ends in a cycle; a positive-cost cycle means +inf, a
    zero-cost cycle contributes nothing. Values are memoized across states.
    """
    memo = {}
    for start in model.states:
        if start in memo:
            continue
        path, prefix, seen = [], [], {}
        x = start
        acc = 0
        while True:
            if x in memo:
                base = memo[x]
                for i, s in enumerate(path):
                    memo[s] = INF if base == INF else (acc - prefix[i]) + base
                break
            if x in seen:
                # cycle closed at path[seen[x]]; zero total cycle cost means
                # every cycle edge is free, so the walk's cost is the value
                cyc_cost = acc - prefix[seen[x]]
                for i, s in enumerate(path):
                    memo[s] = INF if cyc_cost > 0 else acc - prefix[i]
                break
            seen[x] = len(path)
            path.append(x)
            prefix.append(acc)
            u = policy(x)
            if u not in model.controls[x]:
                raise FiniteModelError(f"policy control {u!r} infeasible at {x!r}")
            acc += model.cost[(x, u)]
            x = model.step[(x, u)]
    return {x: memo[x] for x in model.states}


def value_iteration_lower_bound(model: FiniteModel, m_steps: int) -> dict:
    """T^m applied to the all-zeros table (a lower bound that grows with m)."""
    return apply_bellman(model, zero_table(model), m_steps)


def optimal_cost(model: FiniteModel) -> dict:
    """Exact J* via multi-source shortest path to the zero-cost cycles.

    States on a cycle of zero-cost edges have J* = 0; elsewhere J* is the
    cheapest path cost into that set, +inf when unreachable.
    """
    # states on zero-cost cycles: iteratively strip states with no zero-cost
    # successor remaining in the candidate set
    cand = set(model.states)
    changed = True
    while changed:
        changed = False
        for x in list(cand):
            has_zero = any(model.cost[(x, u)] == 0 and model.step[(x, u)] in cand
                           for u in model.controls[x])
            if not has_zero:
                cand.discard(x)
                changed = True
    dist = {x: (0 if x in cand else INF) for x in model.states}
    # Dijkstra on the reversed graph from the zero-cycle set
    rev = {x: [] for x in model.states}
    for x in model.states:
        for u in model.controls[x]:
            rev[model.step[(x, u)]].append((x, model.cost[(x, u)]))
    order = {x: i for i, x in enumerate(model.states)}
    heap = [(0, order[x], x) for x in cand]
    heapq.heapify(heap)
    while heap:
        d, _, y = heapq.heappop(heap)
        if d > dist[y]:
            continue
        for x, c in rev[y]:
            nd = d + c
            if nd < dist[x]:
                dist[x] = nd
                heapq.heappush(heap, (nd, order[x], x))
    return dist


@dataclass
class FiniteRolloutResult:
    values: list           # per-unit lookahead values at x
    selected: int | None   # lowest-index argmin (0-based), None when all inf
    control: object | None # first control of the selected unit
    first_controls: list = field(default_factory=list)


def lookahead_value(model: FiniteModel, J: dict, horizon: int, x):
    """((T^ell J)(x), first minimizing control) by exact recursion."""
    shifted = apply_bellman(model, J, horizon - 1)
    best, rep = INF, None
    for u in model.controls[x]:
        q = model.cost[(x, u)] + shifted[model.step[(x, u)]]
        if q < best:
            best, rep = q, u
    return best, rep


def parallel_rollout_finite(model: FiniteModel, units, x,
                            check_decreasing: bool = True) -> FiniteRolloutResult:
    """Solve every unit's lookahead at x and select the lowest-index argmin.

    `units` is a list of (horizon, table) pairs. Tables that fail the
    one-step decrease certificate only warn: the minimum-of-units identity
    holds for arbitrary nonnegative tables.
    """
    if check_decreasing:
        for i, (_, J) in enumerate(units):
            TJ = bellman_table(model, J)
            bad = [x_ for x_ in model.states if TJ[x_] > J[x_]]
            if bad:
                warnings.warn(f"unit {i + 1} table is not one-step decreasing "
                              f"at {len(bad)} state(s)", stacklevel=2)
    values, firsts = [], []
    for horizon, J in units:
        v, u0 = lookahead_value(model, J, horizon, x)
        values.append(v)
        firsts.append(u0)
    finite = [i for i, v in enumerate(values) if v < INF]
    if not finite:
        return FiniteRolloutResult(values, None, None, firsts)
    best = min(values)
    sel = values.index(best)
    return FiniteRolloutResult(values, sel, firsts[sel], firsts)
