"""Multi-unit lookahead coordination and closed-loop simulation.

Every step fans one lookahead solve per unit out to a worker pool, joins
all results, and applies the first control of the lowest-index minimizing
unit. Selection happens strictly after the join, so trajectories are
bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import INF, ExtendedCost, SwitchedModel
from .numerics import DEFAULT_SETTINGS, NumericSettings
from .planners import PlannerSolution, PreparedUnit, RolloutUnitSpec

BOUND_SLACK = 1e-6
CONVERGED_COST = 1e-9
CONVERGED_NORM = 1e-6


@dataclass(frozen=True)
class FiniteUnitSpec:
    """Lookahead unit over an enumerated model: depth plus a cost table."""

    label: str
    horizon: int
    table: dict


class _PreparedFiniteUnit:
    """Exact finite-model counterpart of a prepared condensed unit."""

    def __init__(self, model, spec: FiniteUnitSpec):
        from .finite_dp import apply_bellman

        self.model = model
        self.spec = spec
        self.shifted = apply_bellman(model, spec.table, spec.horizon - 1)
        self.programs_solved = 0

    def solve(self, x) -> PlannerSolution:
        self.programs_solved += 1
        best, rep = INF, None
        for u in self.model.controls[x]:
            q = self.model.cost[(x, u)] + self.shifted[self.model.step[(x, u)]]
            if q < best:
                best, rep = q, u
        controls = None if best == INF else [rep]
        status = "infeasible" if best == INF else "optimal"
        return PlannerSolution(ExtendedCost(best), controls, None, status, True, 1)


@dataclass
class RolloutConfig:
    model: object
    units: list            # RolloutUnitSpec / FiniteUnitSpec sharing one model
    workers: int = 1
    settings: NumericSettings = DEFAULT_SETTINGS

    def __post_init__(self):
        if not self.units:
            raise ValueError("rollout needs at least one unit")
        self._prepared = [
            _PreparedFiniteUnit(self.model, u) if isinstance(u, FiniteUnitSpec)
            else PreparedUnit(self.model, u, self.settings)
            for u in self.units
        ]

    @property
    def prepared(self):
        return self._prepared

    @property
    def labels(self):
        return [u.label for u in self.units]

    def programs_solved(self) -> int:
        return sum(p.programs_solved for p in self._prepared)


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    values: list                    # per-unit lookahead values
    selected: int | None            # 0-based lowest-index argmin; None if all inf
    control: object | None          # applied first control (value, mode) when switched
    stage_cost: float = 0.0
    running_cost: float = 0.0
    bound: float = INF              # min over units at this step
    solutions: list = field(default_factory=list, repr=False)


@dataclass
class Trajectory:
    records: list
    termination: str                # converged | infeasible | step_cap
    total_cost: float
    model: object = None

    @property
    def initial_bound(self) -> float:
        return self.records[0].bound if self.records else INF

    def bounds(self):
        return [r.bound for r in self.records]

    def selected_units(self):
        return [r.selected for r in self.records]

    def bound_monotone(self, tol=BOUND_SLACK) -> bool:
        b = self.bounds()
        return all(b[i + 1] <= b[i] + tol for i in range(len(b) - 1))

    def cost_within_bound(self, tol=BOUND_SLACK) -> bool:
        return self.total_cost <= self.initial_bound + tol

    def to_csv(self, path):
        p = len(self.records[0].values) if self.records else 0
        cols = ["k", "x1", "x2", "u", "mode", "stage_cost", "running_cost"]
        cols += [f"J{i + 1}" for i in range(p)] + ["selected_unit", "bound"]

        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float) and np.isinf(v):
                return "inf"
            return f"{v:.10g}" if isinstance(v, float) else str(v)

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                if isinstance(r.control, tuple):
                    u, mode = r.control
                elif r.control is None:
                    u, mode = None, None
                else:
                    u, mode = float(r.control), None
                sel = None if r.selected is None else r.selected + 1
                row = [r.k, fmt(float(r.x[0])), fmt(float(r.x[1])), fmt(u),
                       fmt(mode), fmt(r.stage_cost), fmt(r.running_cost)]
                row += [fmt(float(v)) for v in r.values]
                row += [fmt(sel), fmt(float(r.bound))]
                w.writerow(row)


def _solve_all(cfg: RolloutConfig, x) -> list[PlannerSolution]:
    prepared = cfg.prepared
    if cfg.workers and cfg.workers > 1 and len(prepared) > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.workers, len(prepared))) as pool:
            return list(pool.map(lambda p: p.solve(x), prepared))
    return [p.solve(x) for p in prepared]


def _is_finite_model(model) -> bool:
    return getattr(model, "variant", "") == "finite"


def coordinator_step(cfg: RolloutConfig, x, k: int = 0) -> StepRecord:
    """One parallel-rollout decision: solve all units at x, pick the best.

    The applied control is the first control of the lowest-index unit
    attaining the minimum value; with every unit infeasible the record
    carries selected=None and the caller stops.
    """
    if not _is_finite_model(cfg.model):
        x = np.asarray(x, dtype=float)
    sols = _solve_all(cfg, x)
    values = [float(s.value) for s in sols]
    finite = [v for v in values if v < INF]
    if not finite:
        return StepRecord(k, x, values, None, None, bound=INF, solutions=sols)
    best = min(values)
    sel = values.index(best)
    chosen = sols[sel]
    u0 = chosen.controls[0]
    if isinstance(cfg.model, SwitchedModel):
        control = (float(u0), chosen.modes[0])
    elif _is_finite_model(cfg.model):
        control = u0
    else:
        control = float(u0)
    return StepRecord(k, x, values, sel, control, bound=best, solutions=sols)


def _converged(x, x_next, g) -> bool:
    if g >= CONVERGED_COST:
        return False
    if isinstance(x_next, np.ndarray):
        return float(np.linalg.norm(x_next)) < CONVERGED_NORM
    return x_next == x  # finite model: zero-cost self-loop is absorbing


def closed_loop_simulate(cfg: RolloutConfig, x0, steps: int) -> Trajectory:
    """Apply the coordinator recursively and log costs and bounds.

    Stops at convergence (stage cost below 1e-9 with the successor state at
    the origin / an absorbing state), on an all-infeasible step, or at the
    step cap.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    x = x0 if _is_finite_model(cfg.model) else np.asarray(x0, dtype=float)
    records = []
    running = 0.0
    termination = "step_cap"
    for k in range(steps):
        rec = coordinator_step(cfg, x, k)
        if rec.selected is None:
            records.append(rec)
            termination = "infeasible"
            break
        g = cfg.model.stage_cost(x, rec.control)
        if g == INF:
            # the unit certified its first control; disagreement here means
            # boundary round-off, surfaced as an infeasible termination
            records.append(rec)
            termination = "infeasible"
            break
        x_next = cfg.model.f(x, rec.control)
        running += g
        rec.stage_cost = g
        rec.running_cost = running
        records.append(rec)
        if _converged(x, x_next, g):
            x = x_next
            termination = "converged"
            break
        x = x_next
    return Trajectory(records, termination, running, cfg.model)


def support_scan_rollout(cfg: RolloutConfig, box, spacing):
    """Grid supports of the offline minimum and of the rollout policy.

    First scan: label = argmin of the units' shift-adjusted terminal values
    (the units' ingredients compared at equal depth); 0 where all are +inf.
    Second scan: label = unit selected by a full coordinator step; a state
    is in the rollout policy's support exactly when some unit's lookahead
    is feasible there, because the first feasible step already certifies a
    feasible closed-loop continuation.
    """
    from .geometry import SupportScan, grid_axis

    ell = min(u.horizon for u in cfg.units)
    shifted = []
    for u in cfg.units:
        shift = u.horizon - ell
        if shift == 0:
            shifted.append(("terminal", u.terminal))
        else:
            schedule = u.mode_schedule[-shift:] if u.mode_schedule else None
            spec = RolloutUnitSpec(u.label + "_shift", shift, u.terminal, schedule)
            shifted.append(("unit", PreparedUnit(cfg.model, spec, cfg.settings)))

    x_lo, x_hi, y_lo, y_hi = box
    xs = grid_axis(x_lo, x_hi, spacing)
    ys = grid_axis(y_lo, y_hi, spacing)
    lab_bar = np.zeros((xs.size, ys.size), dtype=int)
    lab_mu = np.zeros((xs.size, ys.size), dtype=int)
    for i, xv in enumerate(xs):
        for j, yv in enumerate(ys):
            x = np.array([xv, yv])
            vals = []
            for kind, obj in shifted:
                if kind == "terminal":
                    vals.append(float(obj(x)))
                else:
                    vals.append(float(obj.solve(x).value))
            if any(v < INF for v in vals):
                lab_bar[i, j] = int(np.argmin(vals)) + 1
            rec = coordinator_step(cfg, x)
            if rec.selected is not None:
                lab_mu[i, j] = rec.selected + 1
    return (SupportScan(xs, ys, lab_bar), SupportScan(xs, ys, lab_mu))


@dataclass
class TimingReport:
    per_unit: list          # (label, total seconds) over the trajectory
    sequential: float       # sum over units of their solo wall time
    parallel: float         # wall time with the worker pool joining all units
    steps: int
    programs_per_step: float

    def __str__(self):
        lines = [f"steps: {self.steps}, programs per step: {self.programs_per_step:.1f}"]
        for label, t in self.per_unit:
            lines.append(f"  unit {label}: {t:.4f} s")
        lines.append(f"sequential total: {self.sequential:.4f} s")
        lines.append(f"parallel total:   {self.parallel:.4f} s (informational)")
        return "\n".join(lines)


def timing_report(cfg: RolloutConfig, x0, steps: int) -> TimingReport:
    """Wall-time comparison of sequential and pooled unit solves.

    Informational only: identical work runs once with units timed one at a
    time and once fanned out to threads, replaying the same trajectory.
    """
    x0 = np.asarray(x0, dtype=float)
    # sequential pass, timing each unit on the trajectory's states
    seq_cfg = RolloutConfig(cfg.model, cfg.units, workers=1, settings=cfg.settings)
    traj = closed_loop_simulate(seq_cfg, x0, steps)
    states = [r.x for r in traj.records]
    per_unit = []
    total_programs = 0
    for spec in cfg.units:
        prep = PreparedUnit(cfg.model, spec, cfg.settings)
        t0 = time.perf_counter()
        for x in states:
            prep.solve(x)
        per_unit.append((spec.label, time.perf_counter() - t0))
        total_programs += prep.programs_solved
    sequential = sum(t for _, t in per_unit)
    par_cfg = RolloutConfig(cfg.model, cfg.units,
                            workers=max(2, len(cfg.units)), settings=cfg.settings)
    t0 = time.perf_counter()
    for x in states:
        _solve_all(par_cfg, x)
    parallel = time.perf_counter() - t0
    return TimingReport(per_unit, sequential, parallel, len(states),
                        total_programs / max(len(states), 1))
