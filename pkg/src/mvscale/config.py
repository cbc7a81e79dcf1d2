"""Run configuration: TOML text -> validated RunConfig.

See ``docs/config-reference.md`` for the full key list.  Validation collects
every problem before raising, and names each one by ``section.key``.
"""

import math
import warnings
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .model import MODELS
from .rng import DEFAULT_SEED

SUBCOMMANDS = ("simulate", "average", "poisson", "clt", "rate", "controlled", "probe")

_num = (int, float)
_list_num = "list[float]"
_list_pairs = "list[list[float]]"

SIM_KEYS = {
    "epsilon": (_num, 0.01),
    "delta": (_num, 1.0),
    "dt_ratio": (_num, 0.05),
    "horizon": (_num, 1.0),
    "particles": (int, 200),
    "replicas": (int, 4),
    "seed": (int, DEFAULT_SEED),
    "macro_step": (_num, 1e-3),
    "record_dt": (_num, 0.01),
}

EXPERIMENT_KEYS = {
    "simulate": {
        "kind": (str, "slowfast"),
        "x0": (_num, 1.0),
        "y0": (_num, 0.0),
        "x0_std": (_num, 0.0),
    },
    "average": {
        "points": (_list_pairs, [[1.0, 1.0]]),
        "burn_in": (_num, None),
        "horizon": (_num, None),
        "spacing": (_num, None),
        "step": (_num, None),
        "replicas": (int, 200),
    },
    "poisson": {
        "x": (_num, 1.0),
        "mean": (_num, 1.0),
        "y": (_list_num, [2.0]),
        "replicas": (int, 2000),
        "phi_horizon": (_num, None),
        "step": (_num, None),
        "theta": (bool, True),
        "theta_samples": (int, 64),
        "theta_replicas": (int, 200),
    },
    "clt": {
        "t_eval": (_num, 1.0),
        "eps_list": (_list_num, []),
        "rate_eps_list": (_list_num, []),
        "x0": (_num, 1.0),
        "y0": (_num, 0.0),
    },
    "rate": {
        "target": (_num, 2.0),
        "grid_k": (int, 32),
        "tol": (_num, None),
        "x0": (_num, 1.0),
        "rho_schedule": (_list_num, [1e2, 1e3, 1e4, 1e5]),
        "max_iter": (int, 500),
    },
    "controlled": {
        "delta_list": (_list_num, [0.1, 0.05, 0.02]),
        "eps_rule": (str, "square"),
        "x0": (_num, 1.0),
        "y0": (_num, 0.0),
        "control_value": (_num, 1.0),
        "grid_k": (int, 32),
    },
    "probe": {
        "samples": (int, 1000),
    },
}

OUTPUT_KEYS = {"directory": (str, "mvscale-out"), "formats": ("list[str]", ["csv"])}

# keys after which the scale condition eps/delta -> 0 matters
_LDP_SUBCOMMANDS = ("rate", "controlled")


@dataclass
class RunConfig:
    subcommand: str
    model_name: str
    model_params: dict
    sim: dict
    experiment: dict
    output: dict
    warnings: list = field(default_factory=list)

    def echo(self):
        return {
            "subcommand": self.subcommand,
            "model": {"name": self.model_name, "params": dict(self.model_params)},
            "sim": dict(self.sim),
            "experiment": dict(self.experiment),
            "output": dict(self.output),
        }


def _type_ok(value, spec):
    if spec == _list_num:
        return isinstance(value, list) and all(isinstance(v, _num) and not isinstance(v, bool) for v in value)
    if spec == _list_pairs:
        return isinstance(value, list) and all(
            isinstance(p, list) and len(p) == 2 and all(isinstance(v, _num) and not isinstance(v, bool) for v in p) for p in value
        )
    if spec == "list[str]":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    if spec is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    return isinstance(value, spec)


def _type_name(spec):
    if isinstance(spec, str):
        return spec
    if spec == _num:
        return "number"
    return spec.__name__


def _section(data, name, schema, errors, prefix=None):
    prefix = prefix or name
    raw = data.get(name, {})
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: expected a table")
        return {}
    out = {}
    for key, value in raw.items():
        if key not in schema:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        spec = schema[key][0]
        if not _type_ok(value, spec):
            errors.append(f"{prefix}.{key}: expected {_type_name(spec)}, got {type(value).__name__}")
            continue
        out[key] = float(value) if spec == _num else value
    for key, (spec, default) in schema.items():
        out.setdefault(key, default)
    return out


def parse_config(text, subcommand=None):
    """Parse and validate a TOML run config.

    ``subcommand`` selects the experiment schema; it can also come from
    ``experiment.name``.  Raises ConfigError listing every problem.
    """
    errors = []
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None

    for key in data:
        if key not in ("model", "sim", "experiment", "output"):
            errors.append(f"{key}: unknown section")

    exp_raw = dict(data.get("experiment", {})) if isinstance(data.get("experiment", {}), dict) else {}
    named = exp_raw.pop("name", None)
    sub = subcommand or named
    if sub is None:
        errors.append("experiment.name: missing (or pass the subcommand explicitly)")
    elif sub not in SUBCOMMANDS:
        errors.append(f"experiment.name: unknown subcommand {sub!r}")
    elif subcommand and named and named != subcommand:
        errors.append(f"experiment.name: {named!r} does not match subcommand {subcommand!r}")

    model = data.get("model")
    name, params = None, {}
    if not isinstance(model, dict) or "name" not in model:
        errors.append("model.name: missing")
    else:
        for key in model:
            if key not in ("name", "params"):
                errors.append(f"model.{key}: unknown key")
        name = model["name"]
        if name not in MODELS:
            errors.append(f"model.name: unknown model {name!r}; choose from {sorted(MODELS)}")
        else:
            ptype = MODELS[name][1]
            fields = ptype.__dataclass_fields__
            raw = model.get("params", {})
            if not isinstance(raw, dict):
                errors.append("model.params: expected a table")
                raw = {}
            for key, value in raw.items():
                if key not in fields:
                    errors.append(f"model.params.{key}: unknown parameter for model {name!r}")
                elif isinstance(value, bool) or not isinstance(value, _num):
                    errors.append(f"model.params.{key}: expected number, got {type(value).__name__}")
                else:
                    params[key] = float(value)

    sim = _section(data, "sim", SIM_KEYS, errors)
    sim_raw = data.get("sim", {}) if isinstance(data.get("sim", {}), dict) else {}
    if not sim["epsilon"] > 0:
        errors.append(f"sim.epsilon: must be > 0, got {sim['epsilon']}")
    if not 0 <= sim["delta"] <= 1:
        errors.append(f"sim.delta: must lie in [0, 1], got {sim['delta']}")
    if not sim["dt_ratio"] > 0:
        errors.append("sim.dt_ratio: must be > 0")
    if not sim["horizon"] > 0:
        errors.append("sim.horizon: must be > 0")
    if sim["particles"] < 1:
        errors.append("sim.particles: must be >= 1")
    if sim["replicas"] < 1:
        errors.append("sim.replicas: must be >= 1")
    if not 0 <= sim["seed"] < 2**64:
        errors.append("sim.seed: must be a 64-bit unsigned integer")
    if not sim["macro_step"] > 0:
        errors.append("sim.macro_step: must be > 0")

    experiment = {}
    if sub in SUBCOMMANDS:
        experiment = _section({"experiment": exp_raw}, "experiment", EXPERIMENT_KEYS[sub], errors)
        if sub == "simulate" and experiment["kind"] not in ("slowfast", "smallnoise", "averaged", "coupled", "limit"):
            errors.append(f"experiment.kind: unknown simulation kind {experiment['kind']!r}")
        if sub == "controlled" and not experiment["delta_list"]:
            errors.append("experiment.delta_list: must not be empty")
        if sub == "clt" and experiment["rate_eps_list"] and len(experiment["rate_eps_list"]) < 3:
            errors.append("experiment.rate_eps_list: needs at least 3 values")
    output = _section(data, "output", OUTPUT_KEYS, errors)

    if errors:
        raise ConfigError(errors)

    notes = []
    if sub in _LDP_SUBCOMMANDS and "delta" in sim_raw and sim["delta"] > 0:
        ratio = sim["epsilon"] / sim["delta"]
        if ratio > 0.1 or math.isnan(ratio):
            msg = (f"scale condition: epsilon/delta = {ratio:.3g}; the large-deviation regime needs "
                   "epsilon/delta -> 0 (ratio <= 0.1 recommended)")
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
    return RunConfig(sub, name, params, sim, experiment, output, notes)
