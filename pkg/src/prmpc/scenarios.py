"""Scenario files: schema validation, model/unit construction, shipped data.

A scenario pins a model, the units' ingredients (either design recipes run
at load time or literal value/region data), initial states and run
settings. Shipped scenarios live in the package data directory and load by
short name; everything they compute is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from . import design as dsg
from .design import (Certificate, DesignArtifact, admissible_polytope, certify,
                     design_norm_lyapunov, design_riccati_terminal,
                     design_trial_gain_terminal)
from .geometry import Polytope, SublevelSet, invariant_set, sublevel_alpha
from .model import (INF, LinearPolicy, LinearQuadraticModel, LinearNormModel,
                    NormValue, PiecewiseAffineModel, PiecewiseLinearPolicy,
                    QuadraticValue, SwitchedModel, SwitchedPolicy,
                    TerminalIngredient)
from .finite_dp import FiniteModel, exact_policy_cost
from .model import TablePolicy
from .numerics import DEFAULT_SETTINGS, dare, dlyap, riccati_gain
from .planners import FREE, RolloutUnitSpec
from .rollout import FiniteUnitSpec


class ScenarioError(ValueError):
    pass


def _load_schema(name):
    with resources.files("prmpc.data.schema").joinpath(name).open() as fh:
        return json.load(fh)


def validate_scenario_dict(d: dict):
    try:
        jsonschema.validate(d, _load_schema("scenario.schema.json"))
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ScenarioError(f"scenario schema violation at {path}: {e.message}") from e


def validate_artifact_dict(d: dict):
    try:
        jsonschema.validate(d, _load_schema("artifact.schema.json"))
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ScenarioError(f"artifact schema violation at {path}: {e.message}") from e


def load_scenario_dict(name_or_path) -> dict:
    """Load by shipped short name ('ex3') or filesystem path."""
    text = None
    p = str(name_or_path)
    if p.endswith(".json"):
        with open(p) as fh:
            text = fh.read()
    else:
        ref = resources.files("prmpc.data.scenarios").joinpath(f"{p}.json")
        if not ref.is_file():
            raise ScenarioError(f"unknown scenario {name_or_path!r}")
        text = ref.read_text()
    d = json.loads(text)
    validate_scenario_dict(d)
    return d


def load_reference(name) -> dict:
    ref = resources.files("prmpc.data.reference").joinpath(f"{name}.json")
    if not ref.is_file():
        raise ScenarioError(f"unknown reference table {name!r}")
    return json.loads(ref.read_text())


def shipped_scenarios():
    files = resources.files("prmpc.data.scenarios")
    return sorted(f.name[:-5] for f in files.iterdir() if f.name.endswith(".json"))


# ---------------------------------------------------------------------------
# model and unit construction
# ---------------------------------------------------------------------------

def _boxes(md):
    sset = Polytope.box(md["state_box"]) if "state_box" in md else None
    cset = (Polytope([[1.0], [-1.0]], [md["control_box"]] * 2)
            if "control_box" in md else None)
    return sset, cset


def build_model(md: dict):
    variant = md["variant"]
    if variant == "finite":
        return FiniteModel.from_edges([tuple(e) for e in md["edges"]])
    sset, cset = _boxes(md)
    if variant == "linear_quadratic":
        return LinearQuadraticModel(md["A"], md["B"], md["Q"], md["R"], sset, cset)
    if variant == "linear_norm":
        p = INF if md["p"] == "inf" else 1
        return LinearNormModel(md["A"], md["B"], md["Q"], md["R"], p, sset, cset)
    if variant == "piecewise_affine":
        return PiecewiseAffineModel(md["A_pos"], md["A_neg"], md["B"], md["Q"],
                                    md["R"], sset, cset)
    if variant == "switched":
        return SwitchedModel(md["A_modes"], md["B_modes"], md["Q"], md["R"],
                             sset, cset)
    raise ScenarioError(f"unknown model variant {variant!r}")


@dataclass
class BuiltScenario:
    name: str
    model: object
    units: list                  # RolloutUnitSpec / FiniteUnitSpec
    artifacts: dict              # label -> DesignArtifact (when applicable)
    x0_list: list
    steps: int
    scan: dict | None
    checks: dict
    lower_bound_m: int | None
    description: str = ""
    policies: dict = field(default_factory=dict)   # label -> base policy


def _riccati_gain_of(model):
    K = dare(model.A, model.B, model.Q, model.R)
    return riccati_gain(model.A, model.B, K, model.R)


def _region_for_gain(model, L, mode):
    if mode == "none" or model.state_set is None:
        return None
    adm = admissible_polytope(model.state_set, model.control_set, L)
    if mode == "invariant":
        A_cl = model.A + model.B @ np.atleast_2d(L)
        res = invariant_set(A_cl, adm)
        if not res.certified:
            raise ScenarioError("invariant set iteration did not close")
        return res.polytope
    if mode == "sublevel":
        raise ScenarioError("sublevel regions need the value matrix first")
    raise ScenarioError(f"unknown set mode {mode!r}")


def _build_recipe_unit(model, unit_cfg, seed):
    recipe = unit_cfg["recipe"]
    kind = recipe["kind"]
    label = unit_cfg["label"]
    horizon = unit_cfg["horizon"]

    if kind == "riccati":
        art = design_riccati_terminal(model, seed=seed)
        return RolloutUnitSpec(label, horizon, art.terminal), art
    if kind == "trial_gain":
        art = design_trial_gain_terminal(model, recipe["L"],
                                         recipe.get("set", "polytope")
                                         .replace("invariant", "polytope")
                                         .replace("none", "polytope"),
                                         seed=seed)
        return RolloutUnitSpec(label, horizon, art.terminal), art
    if kind == "norm_lyapunov":
        L = (_riccati_gain_of(model) if recipe.get("gain_from") == "riccati"
             else np.atleast_2d(recipe["L"]))
        region = _region_for_gain(model, L, recipe.get("set", "invariant"))
        art = dsg.design_norm_terminal(model, L, region, seed=seed)
        return RolloutUnitSpec(label, horizon, art.terminal), art
    if kind == "switched_riccati":
        mode = recipe["mode"]
        A, B = model.A_list[mode - 1], model.B_list[mode - 1]
        K = dare(A, B, model.Q, model.R)
        L = riccati_gain(A, B, K, model.R)
        adm = admissible_polytope(model.state_set, model.control_set, L)
        res = invariant_set(A + B @ L, adm)
        if not res.certified:
            raise ScenarioError("invariant set iteration did not close")
        terminal = TerminalIngredient(QuadraticValue(K), res.polytope)
        policy = SwitchedPolicy(L, mode)
        cert = certify(model, terminal, policy, seed=seed)
        art = DesignArtifact("switched_riccati", terminal, policy,
                             {"mode": mode, "L": L.tolist()}, cert)
        j = recipe.get("simplified_iterations", 0)
        spec = dsg.design_simplified_iterate(art, mode, j, horizon, label)
        return spec, art
    if kind == "pwa_zero_gain_sublevel":
        # open-loop design: both branch matrices stable, value from the
        # positive branch's Lyapunov equation, region the largest
        # admissible sublevel set
        K = dlyap(model.A_pos, model.Q)
        alpha = sublevel_alpha(K, model.state_set)
        terminal = TerminalIngredient(QuadraticValue(K), SublevelSet(K, alpha))
        policy = LinearPolicy(np.zeros((1, model.state_dim)))
        cert = certify(model, terminal, policy, seed=seed)
        art = DesignArtifact("pwa_zero_gain_sublevel", terminal, policy,
                             {"K": K.tolist(), "alpha": alpha}, cert)
        return RolloutUnitSpec(label, horizon, art.terminal), art
    raise ScenarioError(f"unknown recipe kind {kind!r}")


def _pwa_dare_policy(model):
    """Per-branch Riccati gains for the piecewise dynamics."""
    gains = []
    for A in (model.A_pos, model.A_neg):
        K = dare(A, model.B, model.Q, model.R)
        gains.append(riccati_gain(A, model.B, K, model.R))
    return PiecewiseLinearPolicy(gains[0], gains[1])


def _build_literal_unit(model, unit_cfg, seed):
    lit = unit_cfg["literal"]
    label = unit_cfg["label"]
    horizon = unit_cfg["horizon"]
    K = np.atleast_2d(np.asarray(lit["K"], dtype=float))

    region = None
    if "S" in lit:
        S = lit["S"]
        region = (Polytope(S["H"], S["h"]) if "H" in S
                  else SublevelSet(S["K"], S["alpha"]))
    pol_cfg = lit.get("policy", {})
    ptype = pol_cfg.get("type")
    recipe = unit_cfg.get("recipe")
    if recipe is not None and region is None:
        # literal value over a recipe-built region (printed-matrix variants)
        L = (_riccati_gain_of_norm(model) if recipe.get("gain_from") == "riccati"
             else np.atleast_2d(recipe["L"]))
        region = _region_for_gain(model, L, recipe.get("set", "invariant"))

    if ptype == "piecewise_dare":
        policy = _pwa_dare_policy(model)
    elif ptype == "piecewise_linear":
        policy = PiecewiseLinearPolicy(pol_cfg["L_pos"], pol_cfg["L_neg"])
    elif ptype == "gain_from_riccati":
        policy = LinearPolicy(_riccati_gain_of_norm(model))
    elif ptype == "linear":
        policy = LinearPolicy(pol_cfg["L"])
    else:
        raise ScenarioError(f"literal unit {label!r} needs a policy type")

    if "p" in lit:
        value = NormValue(K, INF if lit["p"] == "inf" else 1)
    else:
        value = QuadraticValue(K)
    terminal = TerminalIngredient(value, region)
    cert = certify(model, terminal, policy, seed=seed)
    art = DesignArtifact("literal", terminal, policy, {"K": K.tolist()}, cert,
                         notes="value/region data taken verbatim from the reference")
    return RolloutUnitSpec(label, horizon, terminal), art


def _riccati_gain_of_norm(model):
    """Riccati gain of the quadratic problem sharing this model's (A,B,Q,R)."""
    K = dare(model.A, model.B, model.Q, model.R)
    return riccati_gain(model.A, model.B, K, model.R)


def build_scenario(d: dict, *, external_artifact=None, seed=0) -> BuiltScenario:
    """Construct the model and all units of a validated scenario dict.

    `external_artifact` optionally supplies the artifact JSON path for the
    scenario's external unit slot; without it that unit stays inactive.
    """
    model = build_model(d["model"])
    units, artifacts, policies = [], {}, {}
    for unit_cfg in d["units"]:
        label = unit_cfg["label"]
        if "finite_policy" in unit_cfg:
            policy = TablePolicy(unit_cfg["finite_policy"])
            table = exact_policy_cost(model, policy)
            units.append(FiniteUnitSpec(label, unit_cfg["horizon"], table))
            policies[label] = policy
            continue
        if "finite_table" in unit_cfg:
            units.append(FiniteUnitSpec(label, unit_cfg["horizon"],
                                        dict(unit_cfg["finite_table"])))
            continue
        if "literal" in unit_cfg:
            spec, art = _build_literal_unit(model, unit_cfg, seed)
        else:
            spec, art = _build_recipe_unit(model, unit_cfg, seed)
        units.append(spec)
        artifacts[label] = art
        policies[label] = art.policy
    ext = d.get("external_unit")
    if ext is not None and external_artifact is not None:
        art = dsg.load_artifact(external_artifact)
        spec = RolloutUnitSpec(ext["label"], d["units"][0]["horizon"],
                               art.terminal)
        units.insert(ext.get("position", 0), spec)
        artifacts[ext["label"]] = art
        policies[ext["label"]] = art.policy
    return BuiltScenario(
        name=d["name"],
        model=model,
        units=units,
        artifacts=artifacts,
        x0_list=[x for x in d["x0"]],
        steps=d.get("steps", 100),
        scan=d.get("scan"),
        checks=d.get("checks", {}),
        lower_bound_m=d.get("lower_bound", {}).get("m"),
        description=d.get("description", ""),
        policies=policies,
    )


def load_scenario(name_or_path, *, external_artifact=None, seed=0) -> BuiltScenario:
    return build_scenario(load_scenario_dict(name_or_path),
                          external_artifact=external_artifact, seed=seed)
