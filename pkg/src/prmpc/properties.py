"""Seeded random-instance checks of the exact lookahead identities.

All checks run on small enumerated models with integer costs, so every
claimed equality is exact (no tolerances). Each generator plants one
zero-cost absorbing state to keep closed-loop values well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .finite_dp import (FiniteModel, apply_bellman, bellman, bellman_restricted,
                        bellman_table, exact_policy_cost, optimal_cost,
                        parallel_rollout_finite, zero_table)
from .model import INF


def random_finite_model(rng, max_states=8, max_controls=4, max_cost=9) -> FiniteModel:
    n = int(rng.integers(3, max_states + 1))
    states = list(range(n))
    controls, step, cost = {}, {}, {}
    for x in states:
        k = int(rng.integers(1, max_controls + 1))
        menu = []
        for j in range(k):
            u = f"u{j}"
            menu.append(u)
            step[(x, u)] = int(rng.integers(0, n))
            cost[(x, u)] = int(rng.integers(0, max_cost + 1))
        controls[x] = menu
    # plant the zero-cost absorbing state
    controls[0][0] = "stay"
    step[(0, "stay")] = 0
    cost[(0, "stay")] = 0
    step.pop((0, "u0"), None)
    cost.pop((0, "u0"), None)
    return FiniteModel(states, controls, step, cost)


def random_table(rng, model, inf_prob=0.15, max_value=20) -> dict:
    table = {}
    for x in model.states:
        if rng.random() < inf_prob:
            table[x] = INF
        else:
            table[x] = int(rng.integers(0, max_value + 1))
    return table


def random_policy_table(rng, model, restricted=None) -> dict:
    menus = restricted or model.controls
    return {x: menus[x][int(rng.integers(0, len(menus[x])))] for x in model.states}


def random_restriction(rng, model) -> dict:
    out = {}
    for x in model.states:
        menu = model.controls[x]
        keep = [u for u in menu if rng.random() < 0.7]
        out[x] = keep or [menu[0]]
    return out


def pointwise_min_tables(tables) -> dict:
    keys = tables[0].keys()
    return {x: min(t[x] for t in tables) for x in keys}


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""

    def __str__(self):
        return f"{'pass' if self.passed else 'FAIL'}  {self.name}  {self.detail}"


def check_min_commutes(model, tables, ell) -> bool:
    """min_i (T^ell J_i) equals T^ell (min_i J_i), exactly and pointwise."""
    lifted = [apply_bellman(model, J, ell) for J in tables]
    lhs = pointwise_min_tables(lifted)
    rhs = apply_bellman(model, pointwise_min_tables(tables), ell)
    return all(lhs[x] == rhs[x] for x in model.states)


def check_argmin_union(model, tables, ell) -> bool:
    """Minimizer sets of the combined table are the union over minimizing units."""
    jbar = pointwise_min_tables(tables)
    _, arg_bar, _ = bellman(model, apply_bellman(model, jbar, ell - 1))
    lifted = [apply_bellman(model, J, ell - 1) for J in tables]
    full = [apply_bellman(model, J, 1) for J in lifted]
    for x in model.states:
        best = min(f[x] for f in full)
        union = set()
        for f_table, shifted in zip(full, lifted):
            if f_table[x] == best:
                _, args, _ = bellman(model, shifted)
                union |= set(args[x])
        if set(arg_bar[x]) != union:
            return False
    return True


def check_min_closed_under_decrease(model, tables) -> bool:
    """If every table one-step decreases, so does their pointwise minimum."""
    for J in tables:
        TJ = bellman_table(model, J)
        if any(TJ[x] > J[x] for x in model.states):
            return True  # premise void; nothing to check
    jbar = pointwise_min_tables(tables)
    Tbar = bellman_table(model, jbar)
    return all(Tbar[x] <= jbar[x] for x in model.states)


def check_shifted_min_decreases(model, units) -> bool:
    """With decreasing unit tables, the depth-aligned minimum decreases too."""
    ell = min(h for h, _ in units)
    shifted = [apply_bellman(model, J, h - ell) for h, J in units]
    jbar = pointwise_min_tables(shifted)
    Tbar = bellman_table(model, jbar)
    return all(Tbar[x] <= jbar[x] for x in model.states)


def rollout_policy_table(model, units) -> dict:
    """The stationary selection rule as an explicit control table.

    States where every unit is infeasible get an arbitrary control: the
    combined value is +inf there, so no bound claim touches them, and no
    finite-bound trajectory ever reaches them.
    """
    table = {}
    for x in model.states:
        res = parallel_rollout_finite(model, units, x, check_decreasing=False)
        table[x] = res.control if res.control is not None else model.controls[x][0]
    return table


def check_policy_beats_units(model, policies) -> bool:
    """Closed-loop cost of the selection rule never exceeds any unit's value."""
    tables = [exact_policy_cost(model, lambda x, t=t: t[x])
              for t in policies]
    units = [(1, J) for J in tables]
    mu = rollout_policy_table(model, units)
    realized = exact_policy_cost(model, lambda x: mu[x])
    for x in model.states:
        res = parallel_rollout_finite(model, units, x, check_decreasing=False)
        bound = min(res.values)
        if bound < INF and realized[x] > bound:
            return False
    return True


def check_bound_decreases_along_rollout(model, units, steps=30) -> bool:
    """min_i (T^{ell_i} J_i)(x_k) is non-increasing along the selection rule,
    provided every unit table one-step decreases."""
    for _, J in units:
        TJ = bellman_table(model, J)
        if any(TJ[x] > J[x] for x in model.states):
            return True  # premise void
    mu = rollout_policy_table(model, units)
    for x0 in model.states:
        res = parallel_rollout_finite(model, units, x0, check_decreasing=False)
        prev = min(res.values)
        if prev == INF:
            continue
        x = x0
        for _ in range(steps):
            x = model.step[(x, mu[x])]
            res = parallel_rollout_finite(model, units, x, check_decreasing=False)
            cur = min(res.values)
            if cur > prev:
                return False
            prev = cur
    return True


def check_restricted_iterates_decrease(model, rng, ells=(1, 2, 3)) -> bool:
    """A restricted-sweep fixed table stays one-step decreasing under the
    full operator after any number of restricted sweeps."""
    restricted = random_restriction(rng, model)
    # a policy respecting the restriction certifies the premise
    pol = random_policy_table(rng, model, restricted)
    J = exact_policy_cost(model, lambda x: pol[x])
    TbarJ, _, _ = bellman_restricted(model, J, restricted)
    if any(TbarJ[x] > J[x] for x in model.states):
        return False  # the premise must hold by construction
    for ell in ells:
        Jl = dict(J)
        for _ in range(ell):
            Jl, _, _ = bellman_restricted(model, Jl, restricted)
        TJl = bellman_table(model, Jl)
        if any(TJl[x] > Jl[x] for x in model.states):
            return False
    return True


def check_restriction_dominates(model, rng) -> bool:
    """Restricted sweeps never undercut the full sweep."""
    restricted = random_restriction(rng, model)
    J = random_table(rng, model)
    full = bellman_table(model, J)
    part, _, _ = bellman_restricted(model, J, restricted)
    return all(part[x] >= full[x] for x in model.states)


def check_value_iteration(model, m_cap=10) -> bool:
    """The zero-start sweep sequence grows monotonically, stays below the
    optimum, and the optimum is a fixed point."""
    jstar = optimal_cost(model)
    J = zero_table(model)
    for _ in range(m_cap):
        nxt = bellman_table(model, J)
        if any(nxt[x] < J[x] for x in model.states):
            return False
        if any(nxt[x] > jstar[x] for x in model.states):
            return False
        J = nxt
    Tstar = bellman_table(model, jstar)
    return all(Tstar[x] == jstar[x] for x in model.states)


def run_finite_suite(seed=0, instances=100) -> list[PropertyResult]:
    """The full exact property suite over seeded random instances."""
    rng = np.random.default_rng(seed)
    counts = {}

    def mark(name, ok):
        good, total = counts.get(name, (0, 0))
        counts[name] = (good + (1 if ok else 0), total + 1)

    for _ in range(instances):
        model = random_finite_model(rng)
        p = int(rng.integers(1, 5))
        tables = [random_table(rng, model) for _ in range(p)]
        for ell in (1, 2, 3):
            mark("min-commutes", check_min_commutes(model, tables, ell))
            mark("argmin-union", check_argmin_union(model, tables, ell))
        mark("min-stays-decreasing", check_min_closed_under_decrease(model, tables))
        units = [(int(rng.integers(1, 4)), J) for J in tables]
        mark("shifted-min-decreasing", check_shifted_min_decreases(
            model, [(h, exact_policy_cost(model, lambda x, t=random_policy_table(rng, model): t[x]))
                    for h, _ in units]))
        policies = [random_policy_table(rng, model) for _ in range(p)]
        mark("selection-beats-units", check_policy_beats_units(model, policies))
        cost_units = [(int(rng.integers(1, 4)),
                       exact_policy_cost(model, lambda x, t=t: t[x]))
                      for t in policies]
        mark("bound-non-increasing", check_bound_decreases_along_rollout(model, cost_units))
        mark("restricted-iterates", check_restricted_iterates_decrease(model, rng))
        mark("restriction-dominates", check_restriction_dominates(model, rng))
        mark("value-iteration", check_value_iteration(model))
        # the coordinator identity: unit minimum equals the aligned sweep value
        ell = min(h for h, _ in cost_units)
        shifted = [apply_bellman(model, J, h - ell) for h, J in cost_units]
        jbar = pointwise_min_tables(shifted)
        lifted = apply_bellman(model, jbar, ell)
        ok = True
        for x in model.states:
            res = parallel_rollout_finite(model, cost_units, x, check_decreasing=False)
            if min(res.values) != lifted[x]:
                ok = False
        mark("coordinator-identity", ok)

    return [PropertyResult(name, good == total, f"{good}/{total}")
            for name, (good, total) in sorted(counts.items())]
