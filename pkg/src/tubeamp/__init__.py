"""Robust adaptive tube MPC with set-membership identification."""
from .geometry import HPolytope, VPolytope, box, inf_ball
from .system import UncertainModel, DisturbanceModel, NoiseModel, ModelFile, load_model
from .design import Design, synthesize
from .estimator import ParamSet, UnfalsifiedSet, SetEstimator
from .mpc import Controller, ControllerConfig

__version__ = "0.1.0"
