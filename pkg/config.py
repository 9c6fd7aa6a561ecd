# config.py
"""Experiment configuration: TOML text -> validated ExperimentConfig.

Each TOML section is a pydantic model declaring its keys with type, default,
unit and constraints.  Unknown keys, missing required keys and failed
constraints surface as ConfigError naming the section and key.  The resolved
mapping (defaults filled, overrides applied) is kept on the config so the run
manifest can echo it.
"""

from dataclasses import dataclass, replace
from typing import Literal, Optional, Union
import copy
import json
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from coupling import ExchangeModel, ReactionSpec, balanced_exchange, mean_field_force
from errors import ConfigError, OpenFockError
from fockspace import PhaseGrid, check_state_size, level_keys, poisson_uniform, uniform_level, vacuum
from solver import HierarchyProblem, check_model, recovery_map, stability_bound
from transport import PairPotential, TransportSpec, check_velocity_cutoff

logger = logging.getLogger(__name__)

Table = Union[list[float], list[list[float]], list[list[list[float]]]]


def _key(default, unit="", doc="", **constraints):
    return Field(default, description=doc, json_schema_extra={"unit": unit}, **constraints)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Section):
    cells: int = _key(..., doc="spatial cells per axis", ge=1)
    cell_width: float = _key(..., "length", gt=0)
    dim: Literal[1, 2, 3] = _key(1)
    velocity_cells: Optional[int] = _key(None, doc="velocity cells per axis; omit for position-only grids", ge=2)
    velocity_cutoff: Optional[float] = _key(None, "length/time", gt=0)
    velocity_tail_tol: float = _key(1e-8, doc="allowed Maxwell-Boltzmann mass beyond the cutoff", gt=0)
    boundary: Literal["reflecting", "open-with-reservoir"] = _key("reflecting")
    open_faces: list[Literal["lower", "upper"]] = _key([], doc="subset of [lower, upper]")


class TransportSection(_Section):
    model: Optional[str] = _key(None, doc="named special case, see solver.RECOVERY_MAP")
    mode: Optional[Literal["diffusion", "klein-kramers", "liouville", "none"]] = _key(None)
    diffusion: Union[float, list[float], list[list[float]]] = _key(1.0, "length^2/time")
    species_diffusion: dict[str, Union[float, list[list[float]]]] = _key({}, "length^2/time")
    potential: Union[Literal["zero", "harmonic"], Table] = _key("zero", "energy",
                                                               "zero | harmonic | table over the spatial grid")
    stiffness: float = _key(0.0, "energy/length^2", ge=0)
    center: Optional[float] = _key(None, "length")
    friction: float = _key(0.0, "mass/time", ge=0)
    mass: float = _key(1.0, "mass", gt=0)
    temperature: float = _key(1.0, "energy", "k_B T", gt=0)
    pair: Literal["none", "soft"] = _key("none")
    pair_strength: float = _key(0.0, "energy")
    pair_range: float = _key(0.0, "length", ge=0)
    mean_field: bool = _key(False, doc="add the reservoir mean-field force (boundary-flux exchange)")


class ReactionSection(_Section):
    template: Literal["AA->A", "AB->C", "A->0", "0->A"] = _key(...)
    rate: float = _key(..., doc="1/time (pairs, decay) or 1/(time*volume) (birth)", ge=0)
    form: Literal["well-mixed", "doi", "gaussian"] = _key("well-mixed")
    radius: float = _key(0.0, "length", ge=0)
    placement: Literal["midpoint", "uniform-segment"] = _key("midpoint")
    velocity_policy: Literal["maxwell", "inherit"] = _key("maxwell")
    species: list[str] = _key([], doc="species names in template order")
    rate_field: Optional[Table] = _key(None, doc="spatial table for A->0 and 0->A")


class ExchangeSection(_Section):
    kind: Literal["bl-kernel", "boundary-flux"] = _key(...)
    balanced: bool = _key(False, doc="derive kappa_in from kappa_out, beta and mu")
    kappa_in: Union[float, Table] = _key(0.0, "1/(time*volume)")
    kappa_out: float = _key(0.0, "1/time", ge=0)
    beta: Optional[float] = _key(None, "1/energy", "defaults to 1/temperature", gt=0)
    mu: float = _key(0.0, "energy")
    species: str = _key("A")
    reservoir_density: float = _key(0.0, "1/volume", ge=0)
    reservoir_temperature: float = _key(1.0, "energy", gt=0)
    f2_model: Literal["independent", "hard-core"] = _key("independent")
    core_radius: float = _key(0.0, "length", ge=0)
    reservoir_depth: Optional[float] = _key(None, "length", gt=0)


class StateSection(_Section):
    species: list[str] = _key(["A"], min_length=1)
    nmax: Union[int, list[int]] = _key(4, doc="level cap, per species when a list")
    initial: Literal["vacuum", "uniform-level", "poisson"] = _key("vacuum")
    initial_level: Union[int, list[int]] = _key(0)
    initial_mean: float = _key(1.0, ge=0)


class SolverSection(_Section):
    dt: Optional[float] = _key(None, "time", "defaults to half the rk4 stability bound", gt=0)
    t_final: float = _key(1.0, "time", ge=0)
    scheme: Literal["rk4", "implicit-euler"] = _key("rk4")
    record_every: int = _key(1, ge=1)
    stationary: bool = _key(False, doc="also solve for the stationary state")


class SamplerSection(_Section):
    dynamics: Literal["brownian", "langevin", "ballistic"] = _key("brownian")
    dt: float = _key(1e-3, "time", gt=0)
    t_final: float = _key(1.0, "time", ge=0)
    trajectories: int = _key(1000, ge=0)
    record_every: int = _key(1, ge=1)


class OutputSection(_Section):
    dir: str = _key("out")
    checkpoints: int = _key(10, doc="reduce: evaluation times on [0, t_final]", ge=1)
    record: bool = _key(True, doc="write the run to the registry")


class ExperimentFile(_Section):
    name: str = _key("experiment")
    seed: int = _key(0, doc="only source of randomness, 0 <= seed < 2**64", ge=0, lt=2**64)
    grid: GridSection
    transport: TransportSection = Field(default_factory=TransportSection)
    reactions: list[ReactionSection] = Field(default_factory=list)
    exchange: Optional[ExchangeSection] = None
    state: StateSection = Field(default_factory=StateSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    output: OutputSection = Field(default_factory=OutputSection)


SECTION_MODELS = {
    "grid": GridSection,
    "transport": TransportSection,
    "reactions": ReactionSection,
    "exchange": ExchangeSection,
    "state": StateSection,
    "solver": SolverSection,
    "sampler": SamplerSection,
    "output": OutputSection,
}
TOP_LEVEL_KEYS = tuple(k for k in ExperimentFile.model_fields if k not in SECTION_MODELS)

# extra keys first, then missing ones, then everything else
_ERROR_ORDER = {"extra_forbidden": 0, "missing": 1}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    grid: PhaseGrid
    transport: TransportSpec
    mode: str
    model: object
    couplings: tuple
    species: tuple
    nmax: object
    initial: object
    solver: dict
    sampler: dict
    output: dict
    resolved: dict

    def problem(self, threads=1):
        return HierarchyProblem(self.grid, self.transport, self.initial, self.nmax, self.solver["t_final"],
                                self.solver["dt"], self.mode, self.couplings, self.solver["scheme"], self.species,
                                self.solver["record_every"], threads)


def config_error(exc):
    """Translate the first pydantic error into a ConfigError(section, key, reason)."""
    err = sorted(exc.errors(), key=lambda e: _ERROR_ORDER.get(e["type"], 2))[0]
    loc = err["loc"]
    if loc and loc[0] == "reactions" and len(loc) > 1 and isinstance(loc[1], int):
        section, rest = f"reactions[{loc[1]}]", loc[2:]
    elif loc and loc[0] in SECTION_MODELS:
        section, rest = loc[0], loc[1:]
    else:
        section, rest = "top-level", loc
    key = str(rest[0]) if rest else "*"
    if err["type"] == "extra_forbidden":
        unknown_section = section == "top-level" and isinstance(err.get("input"), (dict, list))
        reason = "unknown section" if unknown_section else "unknown key"
    elif err["type"] == "missing":
        reason = "missing required key" if rest else "missing required section"
    else:
        reason = err["msg"]
    return ConfigError(section, key, reason)


def _validate(data):
    try:
        return ExperimentFile.model_validate(data).model_dump()
    except ValidationError as exc:
        raise config_error(exc) from exc


def resolve(data, overrides=None):
    """Validate a parsed TOML mapping, fill defaults and apply overrides."""
    resolved = _validate(data)
    if not overrides:
        return resolved
    for (section, key), value in overrides.items():
        if value is None:
            continue
        label = section or "top-level"
        fields = TOP_LEVEL_KEYS if section == "" else SECTION_MODELS.get(section, BaseModel).model_fields
        if section == "reactions" or key not in fields:
            raise ConfigError(label, key, "unknown override")
        target = resolved if section == "" else resolved[section]
        if target is None:
            raise ConfigError(label, key, "section is not present")
        target[key] = value
    return _validate(resolved)


def _grid(g):
    try:
        return PhaseGrid(g["cells"], float(g["cell_width"]), g["dim"], g["velocity_cells"],
                         None if g["velocity_cutoff"] is None else float(g["velocity_cutoff"]),
                         g["boundary"], tuple(g["open_faces"]))
    except OpenFockError as exc:
        raise ConfigError("grid", "*", str(exc)) from exc


def _transport(t, grid):
    try:
        pair = PairPotential(t["pair"], float(t["pair_strength"]), float(t["pair_range"]))
        potential = t["potential"]
        if isinstance(potential, list):
            potential = np.asarray(potential, dtype=float).reshape(grid.spatial_shape)
        return TransportSpec(t["diffusion"], potential, float(t["stiffness"]), t["center"], pair,
                             float(t["friction"]), float(t["mass"]), float(t["temperature"]),
                             None, tuple(sorted(t["species_diffusion"].items())))
    except (OpenFockError, ValueError) as exc:
        raise ConfigError("transport", "*", str(exc)) from exc


def _reaction(i, r, spec):
    try:
        return ReactionSpec(r["template"], float(r["rate"]), r["form"], float(r["radius"]), r["placement"],
                            r["velocity_policy"], tuple(r["species"]), r["rate_field"],
                            spec.temperature_energy, spec.mass)
    except OpenFockError as exc:
        raise ConfigError(f"reactions[{i}]", "*", str(exc)) from exc


def _exchange(e, grid, spec):
    beta = 1.0 / spec.temperature_energy if e["beta"] is None else float(e["beta"])
    try:
        if e["balanced"]:
            if e["kind"] != "bl-kernel":
                raise ConfigError("exchange", "balanced", "only bl-kernel exchange can be balanced")
            return replace(balanced_exchange(grid, spec, float(e["kappa_out"]), float(e["mu"]), beta),
                           species=e["species"])
        return ExchangeModel(e["kind"], e["kappa_in"], float(e["kappa_out"]), beta, float(e["mu"]), spec.mass,
                             e["species"], float(e["reservoir_density"]), float(e["reservoir_temperature"]),
                             e["f2_model"], float(e["core_radius"]), e["reservoir_depth"])
    except ConfigError:
        raise
    except OpenFockError as exc:
        raise ConfigError("exchange", "*", str(exc)) from exc


def _initial(s, grid, species, nmax):
    kind = s["initial"]
    if kind == "vacuum":
        return vacuum(grid, nmax, species)
    if kind == "uniform-level":
        level = s["initial_level"]
        key = (level,) if isinstance(level, int) else tuple(level)
        if len(key) != len(species):
            raise ConfigError("state", "initial_level", f"expected {len(species)} counts")
        return uniform_level(grid, nmax, key if len(key) > 1 else key[0], species)
    if len(species) != 1:
        raise ConfigError("state", "initial", "poisson initial states are single-species")
    return poisson_uniform(grid, nmax, float(s["initial_mean"]))


def build(resolved, threads=1):
    """Construct domain objects from a resolved mapping and run the cross-field validators."""
    grid = _grid(resolved["grid"])
    t = resolved["transport"]
    spec = _transport(t, grid)
    if grid.has_velocities:
        try:
            check_velocity_cutoff(grid, spec, float(resolved["grid"]["velocity_tail_tol"]))
        except OpenFockError as exc:
            raise ConfigError("grid", "velocity_cutoff", str(exc)) from exc

    model = t["model"]
    mode = t["mode"]
    if model is not None:
        try:
            preset = recovery_map(model)
        except OpenFockError as exc:
            raise ConfigError("transport", "model", str(exc)) from exc
        mode = mode or preset["mode"]
    mode = mode or "diffusion"
    t["mode"] = mode

    couplings = [_reaction(i, r, spec) for i, r in enumerate(resolved["reactions"])]
    exchange = None
    if resolved["exchange"] is not None:
        exchange = _exchange(resolved["exchange"], grid, spec)
        couplings.append(exchange)
    if t["mean_field"]:
        if exchange is None or exchange.kind != "boundary-flux":
            raise ConfigError("transport", "mean_field", "needs a boundary-flux [exchange]")
        try:
            force = mean_field_force(exchange, grid, spec.pair)
        except OpenFockError as exc:
            raise ConfigError("exchange", "reservoir_depth", str(exc)) from exc
        spec = replace(spec, external_force=force)
    if model is not None:
        try:
            check_model(model, mode, couplings)
        except OpenFockError as exc:
            raise ConfigError("transport", "model", str(exc)) from exc

    s = resolved["state"]
    species = tuple(s["species"])
    nmax = s["nmax"] if isinstance(s["nmax"], int) else tuple(s["nmax"])
    caps = (nmax,) * len(species) if isinstance(nmax, int) else nmax
    if len(caps) != len(species):
        raise ConfigError("state", "nmax", f"expected {len(species)} caps")
    try:
        check_state_size(grid, level_keys(caps))
    except OpenFockError as exc:
        raise ConfigError("state", "nmax", str(exc)) from exc
    initial = _initial(s, grid, species, nmax)

    solver = dict(resolved["solver"])
    try:
        prob = HierarchyProblem(grid, spec, initial, nmax, float(solver["t_final"]), solver["dt"] or 1.0,
                                mode, tuple(couplings), solver["scheme"], species, solver["record_every"], threads)
        bound = stability_bound(prob)
    except OpenFockError as exc:
        raise ConfigError("solver", "*", str(exc)) from exc
    if solver["dt"] is None:
        solver["dt"] = 0.5 * bound if bound != float("inf") else float(solver["t_final"]) or 1.0
        resolved["solver"]["dt"] = solver["dt"]
    elif solver["scheme"] == "rk4" and solver["dt"] > bound * (1.0 + 1e-12):
        raise ConfigError("solver", "dt", f"{solver['dt']:g} exceeds the rk4 stability bound {bound:.6g}")

    return ExperimentConfig(resolved["name"], resolved["seed"], grid, spec, mode, model, tuple(couplings), species, nmax,
                            initial, solver, dict(resolved["sampler"]), dict(resolved["output"]), resolved)


def parse_config(text, overrides=None, threads=1):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("document", "*", f"invalid TOML: {exc}") from exc
    resolved = resolve(data, overrides)
    cfg = build(resolved, threads)
    logger.debug("parsed config %s", cfg.name)
    return cfg


def load_config(path, overrides=None, threads=1):
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return parse_config(text, overrides, threads)


def schema_reference():
    """Markdown table of every key, its default and unit."""
    lines = ["| section | key | default | unit | notes |", "|---|---|---|---|---|"]
    tables = [("top-level", {k: ExperimentFile.model_fields[k] for k in TOP_LEVEL_KEYS})]
    tables += [(section, model.model_fields) for section, model in SECTION_MODELS.items()]
    for section, fields in tables:
        for key, field in fields.items():
            default = "required" if field.is_required() else repr(field.default)
            unit = (field.json_schema_extra or {}).get("unit", "")
            lines.append(f"| {section} | {key} | {default} | {unit} | {field.description or ''} |")
    return "\n".join(lines)


def load_manifest(path, overrides=None, threads=1):
    """Rebuild the experiment a run manifest was written for."""
    with open(path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("manifest", "*", f"invalid JSON: {exc}") from exc
    if "config" not in manifest:
        raise ConfigError("manifest", "config", "missing resolved config")
    return build(resolve(copy.deepcopy(manifest["config"]), overrides), threads)
