"""Offline construction of certified terminal ingredients.

Every recipe produces a value function V, an invariant admissible region S
and the base policy that witnesses the two certificate premises: S is
invariant under the policy, and V decreases by at least the stage cost
along it. Certification is a seeded sampling check; artifacts that fail it
carry a visible flag and are still usable (the planner does not require
certification, the trajectory-bound guarantees do).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (GeometryError, Polytope, SublevelSet, invariant_set,
                       sublevel_alpha)
from .model import (INF, NormValue, QuadraticValue, TerminalIngredient,
                    value_from_dict)
from .numerics import (DEFAULT_SETTINGS, NumericsError, NumericSettings, dare,
                       dlyap, eig, riccati_gain, spectral_radius)

CERT_SAMPLES = 10_000
CERT_SLACK_TOL = -1e-8
NORM_DIRECTIONS = 360
SLACK_FLOOR = 1e-6  # scale floor for the normalized slack near the origin


class DesignError(ValueError):
    pass


@dataclass
class Certificate:
    """Sampling check of the invariance and decrease premises over S.

    `decrease_slack` is min over samples of (V(x) - g(x,mu(x)) - V(f(x,mu(x))))
    normalized by ||x||^degree(V) (floored at 1e-6), so quadratic artifacts
    report a matrix-inequality-style margin. `invariance_margin` is the min
    slack of f(x,mu(x)) against the region's inequalities.
    """

    samples: int
    invariance_margin: float
    decrease_slack: float
    slack_tol: float
    passed: bool
    seed: int

    def to_dict(self):
        return {"samples": self.samples,
                "invariance_margin": self.invariance_margin,
                "decrease_slack": self.decrease_slack,
                "slack_tol": self.slack_tol,
                "passed": bool(self.passed),
                "seed": self.seed}


@dataclass
class DesignArtifact:
    kind: str
    terminal: TerminalIngredient
    policy: object
    inputs: dict = field(default_factory=dict)
    certificate: Certificate | None = None
    notes: str = ""

    @property
    def certified(self) -> bool:
        return self.certificate is not None and self.certificate.passed


def _sample_region(region, dim, n, rng, fallback_box=5.0):
    """Uniform rejection sampling from the region's bounding box."""
    if region is None:
        lo = -fallback_box * np.ones(dim)
        hi = fallback_box * np.ones(dim)
        return rng.uniform(lo, hi, size=(n, dim))
    lo, hi = region.bounding_box()
    pts = np.empty((0, dim))
    attempts = 0
    while pts.shape[0] < n:
        cand = rng.uniform(lo, hi, size=(max(n, 1000), dim))
        cand = cand[region.contains_many(cand)]
        pts = np.vstack([pts, cand])
        attempts += 1
        if attempts > 1000:
            raise DesignError("region sampling failed; set may have empty interior")
    return pts[:n]


def certify(model, terminal: TerminalIngredient, policy, *, samples=CERT_SAMPLES,
            slack_tol=CERT_SLACK_TOL, seed=0, sample_box=5.0) -> Certificate:
    """Check the two premises behind the terminal ingredient on samples of S."""
    rng = np.random.default_rng(seed)
    X = _sample_region(terminal.region, model.state_dim, samples, rng, sample_box)
    degree = terminal.value.degree
    inv_margin = INF
    dec_slack = INF
    for x in X:
        u = policy(x)
        g = model.stage_cost(x, u)
        xn = model.f(x, u)
        if terminal.region is None:
            margin = INF
        elif isinstance(terminal.region, Polytope):
            margin = float(np.min(terminal.region.h - terminal.region.H @ xn))
        else:
            margin = terminal.region.alpha - float(xn @ terminal.region.K @ xn)
        inv_margin = min(inv_margin, margin)
        scale = max(float(np.linalg.norm(x)) ** degree, SLACK_FLOOR)
        if g == INF:
            slack = -INF
        else:
            slack = (terminal.value(x) - g - terminal.value(xn)) / scale
        dec_slack = min(dec_slack, slack)
    passed = inv_margin >= -1e-9 and dec_slack >= slack_tol
    return Certificate(samples, inv_margin, dec_slack, slack_tol, passed, seed)


def admissible_polytope(state_set: Polytope, control_set: Polytope | None, L):
    """{x in X_c : L x in U_c} as one polytope (the gain's admissible region)."""
    if control_set is None:
        return state_set
    L = np.atleast_2d(np.asarray(L, dtype=float))
    rows = [state_set.H]
    rhs = [state_set.h]
    for hrow, hval in zip(control_set.H, control_set.h):
        rows.append(hrow[0] * L)
        rhs.append(np.array([hval]))
    return Polytope(np.vstack(rows), np.concatenate(rhs))


def design_riccati_terminal(model, *, settings=DEFAULT_SETTINGS, seed=0,
                            samples=CERT_SAMPLES, A=None, B=None) -> DesignArtifact:
    """Terminal ingredient from the Riccati solution of the model's LQ data.

    K solves the discrete Riccati equation, L is the induced gain, S the
    maximal invariant set of the closed loop inside the admissible region.
    """
    A = model.A if A is None else A
    B = model.B if B is None else B
    K = dare(A, B, model.Q, model.R, settings)
    L = riccati_gain(A, B, K, model.R)
    return _gain_terminal(model, A, B, K, L, "riccati", "polytope",
                          settings=settings, seed=seed, samples=samples)


def design_trial_gain_terminal(model, L, set_mode="polytope", *,
                               settings=DEFAULT_SETTINGS, seed=0,
                               samples=CERT_SAMPLES, sample_box=5.0) -> DesignArtifact:
    """Terminal ingredient for a user-supplied stabilizing gain.

    K solves the closed-loop Lyapunov equation with weight Q + L'RL; the
    region is the invariant polytope or the largest admissible sublevel set
    of x'Kx, per `set_mode`. With no constraints the region is the whole
    space and certification samples a box.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    A_cl = model.A + model.B @ L
    rho = spectral_radius(A_cl)
    if rho >= 1.0 - 1e-9:
        raise DesignError(f"closed loop unstable (spectral radius {rho:.6f})")
    W = model.Q + L.T @ (model.R * L)
    K = dlyap(A_cl, W, settings)
    return _gain_terminal(model, model.A, model.B, K, L, "trial_gain", set_mode,
                          settings=settings, seed=seed, samples=samples,
                          sample_box=sample_box)


def _gain_terminal(model, A, B, K, L, kind, set_mode, *, settings, seed,
                   samples, sample_box=5.0):
    from .model import LinearPolicy

    A_cl = A + B @ np.atleast_2d(L)
    region = None
    notes = ""
    if model.state_set is None and set_mode == "polytope":
        region = None
    elif set_mode == "polytope":
        adm = admissible_polytope(model.state_set, model.control_set, L)
        res = invariant_set(A_cl, adm, settings=settings)
        region = res.polytope
        if not res.certified:
            notes = f"invariant set iteration hit the cap ({res.iterations})"
    elif set_mode == "sublevel":
        adm = admissible_polytope(model.state_set, model.control_set, L)
        alpha = sublevel_alpha(K, adm, settings)
        region = SublevelSet(K, alpha)
    else:
        raise DesignError(f"unknown set mode {set_mode!r}")
    terminal = TerminalIngredient(QuadraticValue(K), region)
    policy = LinearPolicy(L)
    cert = certify(model, terminal, policy, samples=samples, seed=seed,
                   sample_box=sample_box)
    inputs = {"A": A.tolist(), "B": np.asarray(B).tolist(), "Q": model.Q.tolist(),
              "R": model.R, "L": np.atleast_2d(L).tolist()}
    return DesignArtifact(kind, terminal, policy, inputs, cert, notes)


# ---------------------------------------------------------------------------
# vector-norm value functions from the closed-loop eigenstructure
# ---------------------------------------------------------------------------

def _induced_norm(M, p):
    M = np.atleast_2d(M)
    return float(np.abs(M).sum(axis=0).max() if p == 1 else np.abs(M).sum(axis=1).max())


def verify_norm_decrease(K, A_cl, Q, R, L, p, n_dirs=NORM_DIRECTIONS) -> float:
    """Worst slack of ||Kx||_p - g(x, Lx) - ||K A_cl x||_p over unit directions.

    All terms are positively homogeneous of degree one, so the unit circle
    decides the inequality everywhere.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    theta = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    X = np.stack([np.cos(theta), np.sin(theta)])
    KX = np.abs(K @ X)
    KAX = np.abs(K @ A_cl @ X)
    QX = np.abs(Q @ X)
    if p == 1:
        vx, vax, gx = KX.sum(axis=0), KAX.sum(axis=0), QX.sum(axis=0)
    else:
        vx, vax, gx = KX.max(axis=0), KAX.max(axis=0), QX.max(axis=0)
    gu = np.abs(float(R) * (L @ X)[0])
    return float(np.min(vx - vax - gx - gu))


def design_norm_lyapunov(model, L, *, safety=1.05, max_rescale=40,
                         settings=DEFAULT_SETTINGS) -> dict:
    """Construct K with ||Kx||_p a certified decrease function for the gain L.

    The closed loop is brought to real modal form: with eigenvector real and
    imaginary parts as columns of M, W = M^-1 gives W A_cl W^-1 block
    diagonal with induced p-norm gamma = max_i (|a_i| + |b_i|) < 1. Scaling
    K = c W with c >= (||Q M||_p + ||R L M||_p) / (1 - gamma) makes the
    decrease inequality hold; the result is verified on unit directions and
    rescaled (never accepted blindly) until the slack clears -1e-8.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    A_cl = model.A + model.B @ L
    p = model.p
    res = eig(A_cl)
    vals = res.values
    if np.min(np.abs(vals[:, None] - vals[None, :])
              + np.eye(vals.size)) < 1e-9:
        raise DesignError("norm construction needs distinct eigenvalues")
    if np.max(np.abs(vals.real) + np.abs(vals.imag)) >= 1.0:
        raise DesignError("need |Re| + |Im| < 1 for every eigenvalue")
    _, vecs = np.linalg.eig(A_cl)
    cols = []
    used = set()
    for i in range(vals.size):
        if i in used:
            continue
        v = vecs[:, i]
        if abs(vals[i].imag) < 1e-12:
            cols.append(v.real)
            used.add(i)
        else:
            cols.append(v.real)
            cols.append(v.imag)
            used.add(i)
            conj = next(j for j in range(vals.size)
                        if j != i and j not in used
                        and abs(vals[j] - vals[i].conjugate()) < 1e-9)
            used.add(conj)
    M = np.column_stack(cols)
    Wmat = np.linalg.inv(M)
    gamma = _induced_norm(Wmat @ A_cl @ M, p)
    beta = _induced_norm(model.Q @ M, p) + _induced_norm((model.R * L) @ M, p)
    c = safety * beta / (1.0 - gamma)
    K = c * Wmat
    slack = verify_norm_decrease(K, A_cl, model.Q, model.R, L, p)
    rescales = 0
    while slack < CERT_SLACK_TOL and rescales < max_rescale:
        c *= 1.05
        K = c * Wmat
        slack = verify_norm_decrease(K, A_cl, model.Q, model.R, L, p)
        rescales += 1
    if slack < CERT_SLACK_TOL:
        raise DesignError(f"norm decrease verification failed (slack {slack:.3e})")
    return {"K": K, "gamma": gamma, "scale": c, "slack": slack,
            "rescales": rescales}


def design_norm_terminal(model, L, region, *, settings=DEFAULT_SETTINGS, seed=0,
                         samples=CERT_SAMPLES) -> DesignArtifact:
    """Certified norm-value terminal over a supplied invariant region."""
    from .model import LinearPolicy

    out = design_norm_lyapunov(model, L, settings=settings)
    terminal = TerminalIngredient(NormValue(out["K"], model.p), region)
    policy = LinearPolicy(L)
    cert = certify(model, terminal, policy, samples=samples, seed=seed)
    inputs = {"L": np.atleast_2d(L).tolist(), "gamma": out["gamma"],
              "scale": out["scale"], "direction_slack": out["slack"]}
    return DesignArtifact("norm_lyapunov", terminal, policy, inputs, cert)


def design_simplified_iterate(base: DesignArtifact, mode: int, iterations: int,
                              base_horizon: int = 1, label: str | None = None):
    """Unit spec realizing extra restricted-improvement sweeps as horizon.

    Rather than tabulating the iterated function, the unit's planner runs
    `base_horizon` free stages followed by `iterations` stages pinned to the
    given mode, with the base terminal ingredient at the end.
    """
    from .planners import FREE, RolloutUnitSpec

    if iterations < 0:
        raise DesignError("iteration count must be nonnegative")
    schedule = (FREE,) * base_horizon + (int(mode),) * iterations
    return RolloutUnitSpec(label or f"mode{mode}", base_horizon + iterations,
                           base.terminal, schedule)


# ---------------------------------------------------------------------------
# artifact (de)serialization
# ---------------------------------------------------------------------------

def _policy_to_dict(policy):
    from .model import LinearPolicy, PiecewiseLinearPolicy, SwitchedPolicy

    if isinstance(policy, LinearPolicy):
        return {"type": "linear", "L": policy.L.tolist()}
    if isinstance(policy, PiecewiseLinearPolicy):
        return {"type": "piecewise_linear", "L_pos": policy.L_pos.tolist(),
                "L_neg": policy.L_neg.tolist()}
    if isinstance(policy, SwitchedPolicy):
        return {"type": "switched", "L": policy.L.tolist(), "mode": policy.mode}
    raise DesignError(f"policy {type(policy).__name__} is not serializable")


def _policy_from_dict(d):
    from .model import LinearPolicy, PiecewiseLinearPolicy, SwitchedPolicy

    if d["type"] == "linear":
        return LinearPolicy(d["L"])
    if d["type"] == "piecewise_linear":
        return PiecewiseLinearPolicy(d["L_pos"], d["L_neg"])
    if d["type"] == "switched":
        return SwitchedPolicy(d["L"], d["mode"])
    raise DesignError(f"unknown policy type {d['type']!r}")


def artifact_to_dict(art: DesignArtifact) -> dict:
    return {
        "kind": art.kind,
        "inputs": art.inputs,
        "terminal": art.terminal.to_dict(),
        "policy": _policy_to_dict(art.policy),
        "certificate": art.certificate.to_dict() if art.certificate else None,
        "notes": art.notes,
    }


def artifact_from_dict(d: dict) -> DesignArtifact:
    from .scenarios import validate_artifact_dict

    validate_artifact_dict(d)
    cert = None
    if d.get("certificate"):
        c = d["certificate"]
        cert = Certificate(c["samples"], c["invariance_margin"],
                           c["decrease_slack"], c["slack_tol"], c["passed"],
                           c.get("seed", 0))
    return DesignArtifact(d["kind"], TerminalIngredient.from_dict(d["terminal"]),
                          _policy_from_dict(d["policy"]), d.get("inputs", {}),
                          cert, d.get("notes", ""))


def save_artifact(art: DesignArtifact, path):
    with open(path, "w") as fh:
        json.dump(artifact_to_dict(art), fh, indent=2)


def load_artifact(path) -> DesignArtifact:
    with open(path) as fh:
        d = json.load(fh)
    art = artifact_from_dict(d)
    if not art.certified:
        import warnings
        warnings.warn(f"loaded artifact {art.kind!r} from {path} is not certified",
                      stacklevel=2)
    return art
