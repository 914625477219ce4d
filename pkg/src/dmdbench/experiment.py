"""Config-driven experiments: schema, seeding, learning-rate modes and trial batches."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .attack import DeliveryCalendar, build_calendar, make_schedule
from .equilibrium import EquilibriumSolution, solve_mwe_frank_wolfe
from .latency import EdgeLatencySpec, LatencyOracle, NoiseSpec
from .network import Network, NetworkError
from .solver import Trajectory, bregman, default_learning_rate, make_mirror_map, run_dmd_batch

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ETA_MODES = ("default-rule", "explicit", "blind")
# below this the start point already is the equilibrium and the default rule
# would return eta = 0; the blind radius is used instead
D1_FLOOR = 1e-12
BATCH = 256

_number_or_list = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]}
_edge = {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["network", "T"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "name": {"type": "string"},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["nodes", "edges", "od_pairs"],
            "properties": {
                "nodes": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                "edges": {"type": "array", "items": _edge, "minItems": 1},
                "od_pairs": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["origin", "destination", "demand", "paths"],
                        "properties": {
                            "origin": {"type": "string"},
                            "destination": {"type": "string"},
                            "demand": {"type": "number", "exclusiveMinimum": 0},
                            "paths": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _edge, "minItems": 1}},
                        },
                    },
                },
                "path_ids": {"type": "array", "items": {"type": "string"}},
            },
        },
        "latency": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"free_flow": _number_or_list, "slope": _number_or_list, "power": _number_or_list},
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "model": {"enum": ["bounded-uniform", "truncated-gaussian"]},
                "scale": _number_or_list,
                "sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "bound": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": ["none", "constant", "uniform-random", "burst"]},
                "d": {"type": "integer", "minimum": 1},
                "start": {"type": "integer", "minimum": 1},
                "length": {"type": "integer", "minimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mirror_map": {"enum": ["entropic", "euclidean"]},
                "eta_mode": {"enum": list(ETA_MODES)},
                "eta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "eta_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "equilibrium": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
            },
        },
        "T": {"type": "integer", "minimum": 1},
        "trials": {"type": "integer", "minimum": 1},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
    },
}

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "name": "experiment",
    "latency": {"free_flow": 0.0, "slope": 1.0, "power": 1.0},
    "noise": {"model": "bounded-uniform", "scale": 0.0, "sigma": None, "bound": None},
    "attack": {"strategy": "none", "d": 1, "start": 1, "length": 0},
    "solver": {"mirror_map": "entropic", "eta_mode": "default-rule", "eta": None, "eta_scale": 1.0},
    "equilibrium": {"tol": 1e-10, "max_iters": 100_000},
    "trials": 100,
    "delta": 0.05,
    "seed": 0,
    "output_dir": "out",
}


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is the JSON pointer of the offending field."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.path), list(map(str, e.path))))
    if not errors:
        return
    err = errors[0]
    parts = list(err.absolute_path)
    if err.validator == "required":
        missing = next(k for k in err.validator_value if k not in err.instance)
        parts.append(missing)
    raise ConfigError(err.message, _pointer(parts))


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def normalize_config(raw: dict) -> dict:
    """Validate and fill defaults. The result is a fixpoint of this function."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    validate_config(raw)
    cfg = _merge(DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return normalize_config(raw)


def builtin_config(name: str) -> dict:
    """One of the shipped instances (``diamond``, ``diamond_symmetric``, ``braess``, ``single_edge``)."""
    ref = resources.files("dmdbench") / "configs" / f"{name}.json"
    if not ref.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return normalize_config(json.loads(ref.read_text()))


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.split("."), value


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides:
        keys, value = parse_override(item)
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"override {item!r} does not name a config section", _pointer(keys[:-1]))
            node = node[k]
        node[keys[-1]] = value
    return normalize_config(out)


# --- seeding -----------------------------------------------------------------

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def trial_seeds(master: int, n: int, offset: int = 0) -> list[int]:
    """Seeds of trials offset..offset+n-1: the splitmix64 stream started at ``master``."""
    state, out = master & MASK64, []
    for i in range(offset + n):
        state, z = splitmix64(state)
        if i >= offset:
            out.append(z)
    return out


def trial_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (schedule, noise) generators for one trial."""
    sched, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sched), np.random.default_rng(noise)


# --- experiment --------------------------------------------------------------


def _per_edge(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"needs one value per edge ({n}), got {arr.shape[0]}", name)
    return arr


@dataclass
class TrialBatch:
    seeds: list[int]
    trajectories: list[Trajectory]


class Experiment:
    """A normalized config turned into oracle, equilibrium and learning-rate choices."""

    def __init__(self, cfg: dict):
        self.cfg = normalize_config(cfg)
        try:
            self.network = Network.from_dict(self.cfg["network"])
        except (NetworkError, KeyError) as exc:
            raise ConfigError(str(exc), "/network") from exc
        n = self.network.n_edges
        lat = self.cfg["latency"]
        try:
            self.spec = EdgeLatencySpec(
                _per_edge(lat["free_flow"], n, "/latency/free_flow"),
                _per_edge(lat["slope"], n, "/latency/slope"),
                _per_edge(lat["power"], n, "/latency/power"),
            )
            nz = self.cfg["noise"]
            noise = NoiseSpec(nz["model"], _per_edge(nz["scale"], n, "/noise/scale"), nz["sigma"], nz["bound"])
            self.oracle = LatencyOracle(self.network, self.spec, noise)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), "/noise" if "noise" in str(exc) else "/latency") from exc
        self.mirror = make_mirror_map(self.cfg["solver"]["mirror_map"], self.network)

    @property
    def T(self) -> int:
        return self.cfg["T"]

    @property
    def delta(self) -> float:
        return self.cfg["delta"]

    @property
    def budget(self) -> int:
        """Per-iterate delay budget d the attack is configured for."""
        attack = self.cfg["attack"]
        return 1 if attack["strategy"] == "none" else attack["d"]

    @cached_property
    def equilibrium(self) -> EquilibriumSolution:
        eq = self.cfg["equilibrium"]
        sol = solve_mwe_frank_wolfe(self.oracle, tol=eq["tol"], max_iters=eq["max_iters"])
        if not sol.converged:
            log.warning("Frank-Wolfe stopped with duality gap %.3g > tol %.3g", sol.duality_gap, eq["tol"])
        return sol

    @cached_property
    def start(self) -> np.ndarray:
        return self.network.uniform_flow()

    @cached_property
    def d1(self) -> float:
        """Divergence from the start point to the equilibrium."""
        return bregman(self.mirror, self.start, self.equilibrium.flow)

    @cached_property
    def blind_radius(self) -> float:
        """Largest divergence from the start point to any feasible flow (attained at a vertex)."""
        vertices = self.network.vertices()
        return max(bregman(self.mirror, self.start, v) for v in vertices)

    @cached_property
    def design_radius(self) -> float:
        """The D1 value the learning-rate rule is fed."""
        mode = self.cfg["solver"]["eta_mode"]
        if mode == "blind" or self.d1 < D1_FLOOR:
            return self.blind_radius
        return self.d1

    def design_eta(self, T: int | None = None, d: int | None = None) -> float:
        T = self.T if T is None else T
        d = self.budget if d is None else d
        if self.design_radius <= 0:
            # a single feasible flow: the iterate never moves, any step works
            return 1.0
        return default_learning_rate(self.design_radius, self.oracle.sigma, self.mirror.strong_convexity, d, T, self.delta)

    def eta(self, T: int | None = None, d: int | None = None) -> float:
        solver = self.cfg["solver"]
        if solver["eta_mode"] == "explicit":
            if solver["eta"] is None:
                raise ConfigError("explicit eta mode needs solver.eta", "/solver/eta")
            base = solver["eta"]
        else:
            base = self.design_eta(T, d)
        return base * solver["eta_scale"]

    def calendar(self, rng: np.random.Generator, T: int | None = None, d: int | None = None) -> DeliveryCalendar:
        attack = self.cfg["attack"]
        T = self.T if T is None else T
        d = attack["d"] if d is None else d
        schedule = make_schedule(attack["strategy"], T, d=d, start=attack["start"], length=attack["length"], rng=rng, quiet=True)
        return build_calendar(schedule)

    def run_trials(self, seeds: Sequence[int], T: int | None = None, d: int | None = None, jobs: int = 1) -> list[Trajectory]:
        """One trajectory per seed, in seed order; results do not depend on ``jobs``."""
        seeds = list(seeds)
        chunks = [seeds[i : i + BATCH] for i in range(0, len(seeds), BATCH)]
        if jobs > 1 and len(chunks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(_run_chunk, [(self.cfg, c, T, d) for c in chunks]))
        else:
            parts = [self._run_chunk(c, T, d) for c in chunks]
        return [traj for part in parts for traj in part]

    def _run_chunk(self, seeds: Sequence[int], T: int | None, d: int | None) -> list[Trajectory]:
        T = self.T if T is None else T
        d_run = self.budget if d is None else d
        if self.cfg["attack"]["strategy"] != "none" and d_run > T ** (1 / 3):
            log.warning("delay budget %d exceeds T^(1/3) = %.2f; the rate bound is no longer sublinear", d_run, T ** (1 / 3))
        calendars, rngs = [], []
        for s in seeds:
            sched_rng, noise_rng = trial_rngs(s)
            calendars.append(self.calendar(sched_rng, T, d))
            rngs.append(noise_rng)
        sol = self.equilibrium
        eta = self.eta(T, d)
        trajs = run_dmd_batch(self.oracle, calendars, self.mirror, eta, rngs, sol.flow, sol.potential, self.start)
        for s, traj in zip(seeds, trajs):
            traj.meta["seed"] = s
        return trajs


def _run_chunk(args) -> list[Trajectory]:
    cfg, seeds, T, d = args
    return Experiment(cfg)._run_chunk(seeds, T, d)


def bound_margin(traj: Trajectory, rhs: float) -> float:
    """rhs minus eta * sum_t (Phi(mu^t) - Phi*) + D(mu*, mu^{T+1}); negative means violated."""
    lhs = traj.eta * float(traj.gap[:-1].sum()) + float(traj.bregman_to_star[-1])
    return rhs - lhs

