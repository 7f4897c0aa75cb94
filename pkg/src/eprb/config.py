"""Experiment configuration: YAML schema, validation, and builders.

A configuration file has five blocks: problem, discretization, greedy,
optim, output.  Every quantity an experiment emits must be reproducible
from the file plus a seed, so the parsed content is also hashed
(canonical JSON, sha256) and the hash is stamped into result artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .fe import AssembledOperators, FeSpace, assemble, build_space
from .problem import (
    ProblemDefinition,
    TimeGrid,
    constant_signal,
    named_signal,
    sampled_signal,
    sincos_signal,
    step_signal,
)

__all__ = [
    "ExperimentConfig",
    "ProblemBlock",
    "DiscretizationBlock",
    "GreedyBlock",
    "OptimBlock",
    "OutputBlock",
    "load_config",
    "config_hash",
    "build_setting",
    "make_signal",
    "training_lattice",
]


@dataclass(frozen=True)
class ProblemBlock:
    length: float = 1.0
    final_time: float = 1.0
    y_init: float = 5.0
    input: object = "u1"  # named family entry or {name: ..., parameters}
    mu_low: tuple = (1.0, 1.0, 1.0, 1.0)
    mu_high: tuple = (5.0, 5.0, 5.0, 5.0)


@dataclass(frozen=True)
class DiscretizationBlock:
    n_cells: int = 200
    order: int = 1
    n_steps: int = 201


@dataclass(frozen=True)
class GreedyBlock:
    tol: float = 1e-4
    max_basis: int = 50
    training_points: int = 5  # lattice points per parameter direction
    test_count: int = 100


@dataclass(frozen=True)
class OptimBlock:
    alpha_j: float = 1e5
    lambda_reg: float = 1e-7
    mu_ref: tuple = (3.0, 3.0, 3.0, 3.0)
    mu_init: tuple = (3.0, 3.0, 3.0, 3.0)
    mu_star: tuple = (2.0, 3.0, 4.0, 5.0)
    noise_var: float = 1e-3
    seed: int = 0
    eps_tr: float = 1e-5
    max_outer: int = 30
    warm_start: Optional[str] = None  # greedy artifact to seed the local model


@dataclass(frozen=True)
class OutputBlock:
    directory: str = "results"
    plots: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemBlock = field(default_factory=ProblemBlock)
    discretization: DiscretizationBlock = field(default_factory=DiscretizationBlock)
    greedy: GreedyBlock = field(default_factory=GreedyBlock)
    optim: OptimBlock = field(default_factory=OptimBlock)
    output: OutputBlock = field(default_factory=OutputBlock)


_BLOCKS = {
    "problem": ProblemBlock,
    "discretization": DiscretizationBlock,
    "greedy": GreedyBlock,
    "optim": OptimBlock,
    "output": OutputBlock,
}


def _coerce(name: str, key: str, annotation: str, value):
    # YAML 1.1 reads unsigned exponents like 1.0e5 as strings, so numeric
    # fields coerce by declared type instead of trusting the parser
    try:
        if annotation == "float":
            return float(value)
        if annotation == "int":
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if annotation == "tuple":
            if not isinstance(value, (list, tuple)):
                raise ValueError
            return tuple(float(v) for v in value)
        if annotation == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ValueError(
            f"config block {name!r}: key {key!r} expects {annotation}, got {value!r}"
        ) from None
    return value


def _build_block(name: str, cls, raw: dict):
    fields = cls.__dataclass_fields__
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"config block {name!r}: unknown keys {sorted(unknown)}")
    kwargs = {
        key: _coerce(name, key, str(fields[key].type), value) for key, value in raw.items()
    }
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"config block {name!r}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping of blocks")
    unknown = set(raw) - set(_BLOCKS)
    if unknown:
        raise ValueError(f"{path}: unknown blocks {sorted(unknown)}")
    blocks = {}
    for name, cls in _BLOCKS.items():
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ValueError(f"{path}: block {name!r} must be a mapping")
        blocks[name] = _build_block(name, cls, sub)
    cfg = ExperimentConfig(**blocks)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    p, d, g, o = cfg.problem, cfg.discretization, cfg.greedy, cfg.optim
    if p.length <= 0 or p.final_time <= 0:
        raise ValueError("domain length and final time must be positive")
    if len(p.mu_low) != 4 or len(p.mu_high) != 4:
        raise ValueError("parameter box needs four components per bound")
    if any(lo > hi for lo, hi in zip(p.mu_low, p.mu_high)):
        raise ValueError("parameter box is empty")
    if d.n_cells < 1 or d.order not in (1, 2) or d.n_steps < 1:
        raise ValueError("discretization block out of range")
    if g.tol <= 0 or g.max_basis < 1 or g.training_points < 1 or g.test_count < 0:
        raise ValueError("greedy block out of range")
    if o.alpha_j < 0 or o.lambda_reg < 0 or o.noise_var < 0 or o.eps_tr <= 0 or o.max_outer < 1:
        raise ValueError("optim block out of range")
    for key in ("mu_ref", "mu_init", "mu_star"):
        vec = np.asarray(getattr(o, key), dtype=float)
        if vec.shape != (4,):
            raise ValueError(f"optim.{key} needs four components")
        if np.any(vec < np.asarray(p.mu_low)) or np.any(vec > np.asarray(p.mu_high)):
            raise ValueError(f"optim.{key} lies outside the parameter box")
    make_signal(p.input)  # fails early on a bad input spec


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical JSON form of the parsed configuration."""
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def make_signal(spec) -> Callable[[float], float]:
    """Input signal from a family name or a parameterized mapping."""
    if isinstance(spec, str):
        return named_signal(spec)
    if not isinstance(spec, dict) or "name" not in spec:
        raise ValueError(f"input spec must be a name or a mapping with one: {spec!r}")
    kind = spec["name"]
    args = {k: v for k, v in spec.items() if k != "name"}
    builders = {
        "constant": constant_signal,
        "step": step_signal,
        "sincos": sincos_signal,
        "sampled": sampled_signal,
    }
    if kind in builders:
        try:
            return builders[kind](**args)
        except TypeError as exc:
            raise ValueError(f"input spec {kind!r}: {exc}") from exc
    if args:
        raise ValueError(f"named input {kind!r} takes no parameters")
    return named_signal(kind)


def build_setting(cfg: ExperimentConfig) -> tuple[ProblemDefinition, FeSpace, AssembledOperators, TimeGrid]:
    """Problem, FE space, assembled operators, and time grid from a config."""
    p, d = cfg.problem, cfg.discretization
    one = lambda x: np.ones_like(x)
    y0 = float(p.y_init)
    problem = ProblemDefinition(
        length=float(p.length),
        final_time=float(p.final_time),
        kappa1=one,
        kappa2=one,
        y_init=lambda x: y0 * np.ones_like(x),
        u=make_signal(p.input),
        mu_low=np.asarray(p.mu_low, dtype=float),
        mu_high=np.asarray(p.mu_high, dtype=float),
    )
    space = build_space(problem.length, d.n_cells, d.order)
    ops = assemble(problem, space)
    grid = TimeGrid.uniform(problem.final_time, d.n_steps)
    return problem, space, ops, grid


def training_lattice(cfg: ExperimentConfig) -> np.ndarray:
    """Uniform tensor lattice over the parameter box, one axis per parameter."""
    p, g = cfg.problem, cfg.greedy
    axes = [np.linspace(lo, hi, g.training_points) for lo, hi in zip(p.mu_low, p.mu_high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
