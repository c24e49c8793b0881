"""Scenario files: everything needed to reproduce a run from a seed."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..design import Design, load_design, synthesize
from ..geometry import HPolytope, inf_ball
from ..mpc import ControllerConfig
from ..system import DisturbanceModel, ModelFile, NoiseModel, UncertainModel, load_model

CONTROLLER_KEYS = ("N", "N_u", "gamma", "Q", "R", "tol", "periodic", "pe_iterations",
                   "gamma_off", "estimate", "window", "retry_tol")


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    name: str
    model: str
    design: str | None = None
    design_options: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    disturbance: dict = field(default_factory=dict)
    theta0: str = "model"                 # "model" or "truth" (singleton at theta*)
    initial_conditions: list = field(default_factory=list)
    steps: int = 100
    ensemble: int = 1
    seed: int = 0
    out: str = "out"
    study: dict = field(default_factory=dict)
    base_dir: str = field(default=".", compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "model": self.model, "design": self.design,
            "design_options": self.design_options, "controller": self.controller,
            "disturbance": self.disturbance, "theta0": self.theta0,
            "initial_conditions": self.initial_conditions, "steps": self.steps,
            "ensemble": self.ensemble, "seed": self.seed, "out": self.out, "study": self.study,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario keys: {sorted(extra)}")
        if "name" not in d or "model" not in d:
            raise ScenarioError("scenario needs 'name' and 'model'")
        cfg = cls(**copy.deepcopy(d), base_dir=str(base_dir))
        bad = set(cfg.controller) - set(CONTROLLER_KEYS)
        if bad:
            raise ScenarioError(f"unknown controller keys: {sorted(bad)}")
        if cfg.theta0 not in ("model", "truth"):
            raise ScenarioError("theta0 must be 'model' or 'truth'")
        return cfg

    def with_overrides(self, **kw) -> "ScenarioConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if v is not None:
                d[k] = v
        return ScenarioConfig.from_dict(d, self.base_dir)

    @property
    def config_hash(self) -> str:
        """Digest of the content that determines a run (output path and ensemble size excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("ensemble")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def controller_config(self) -> ControllerConfig:
        c = dict(self.controller)
        for key in ("Q", "R"):
            if c.get(key) is not None:
                c[key] = np.atleast_2d(np.array(c[key], dtype=float))
        return ControllerConfig(**c)

    def resolve(self, ref: str) -> str:
        if ref.startswith("bundled:"):
            return ref
        p = Path(ref)
        return str(p if p.is_absolute() else Path(self.base_dir) / p)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario file; ``bundled:<name>`` reads a shipped scenario."""
    path = str(path)
    if path.startswith("bundled:"):
        name = path.split(":", 1)[1]
        text = resources.files("tubeamp.data").joinpath(f"scenario_{name}.json").read_text()
        return ScenarioConfig.from_dict(json.loads(text))
    p = Path(path)
    return ScenarioConfig.from_dict(json.loads(p.read_text()), p.parent)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))


@dataclass(frozen=True)
class Setup:
    """Loaded and derived objects of a scenario."""

    model: UncertainModel
    disturbance: DisturbanceModel
    noise: NoiseModel | None
    design: Design | None


def _override_disturbance(mf: ModelFile, block: dict) -> DisturbanceModel:
    dm = mf.disturbance
    W, omega, sampler, rho = dm.W, dm.omega, dm.sampler, dm.rho
    n = mf.model.n_x
    if "half_width" in block:
        W = inf_ball(float(block["half_width"]), n)
        omega = None
    if "sampler" in block:
        sampler = block["sampler"]
    return DisturbanceModel(W, omega, sampler, rho)


def build_setup(cfg: ScenarioConfig, with_design: bool = True) -> Setup:
    mf = load_model(cfg.resolve(cfg.model))
    model = mf.model
    if cfg.theta0 == "truth":
        ts = model.theta_star
        p = model.p
        model = model.with_theta0(HPolytope(np.vstack([np.eye(p), -np.eye(p)]), np.r_[ts, -ts]))
    dist = _override_disturbance(mf, cfg.disturbance)
    design = None
    if with_design:
        if cfg.design:
            design = load_design(cfg.resolve(cfg.design))
        else:
            opts = dict(cfg.design_options)
            for key in ("Q", "R"):
                if opts.get(key) is not None:
                    opts[key] = np.atleast_2d(np.array(opts[key], dtype=float))
            design = synthesize(mf.model, dist.W, **opts)
    return Setup(model, dist, mf.noise, design)
