"""Planning by scoring a factorized (path x velocity) trajectory vocabulary."""

from .trajectory import FactorizationConfig, GeometricPath, Trajectory, VelocityProfile, compose, factorize
from .vocabulary import TrajectoryVocabulary, build_path_vocab, build_velocity_vocab
from .teacher import SubScores, epdms, pdms
from .planner import StageConfig, plan, plan_exhaustive

__all__ = [
    "FactorizationConfig", "GeometricPath", "Trajectory", "VelocityProfile", "compose", "factorize",
    "TrajectoryVocabulary", "build_path_vocab", "build_velocity_vocab",
    "SubScores", "epdms", "pdms", "StageConfig", "plan", "plan_exhaustive",
]

__version__ = "0.1.0"
