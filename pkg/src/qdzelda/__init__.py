"""MAP-Elites family neuroevolution for a deterministic Zelda-like grid game."""
from .algorithms import (CmaConfig, CmaEmitter, CmaMeDriver, DmeConfig, DmeDriver, EfmeConfig,
                         EfmeDriver, Evaluator, VmeConfig, VmeDriver, evaluate_candidate)
from .archive import (BehaviorFeature, Criterion, EliteEntry, EliteMap, EvaluationResult,
                      FeatureScheme, GenomeStore, feature_from_results, feature_to_string,
                      parse_feature)
from .config import ExperimentConfig, load_config, parse_config
from .env import Action, EnvConfig, Level, load_level_set, parse_level, reset, run_episode, step
from .policy import Genome, NetworkPolicy, NetworkTopology, ObsMode, init_genome, mutate
from .runner import Run, checkpoint, restore, run_parallel, run_sequential

__version__ = "0.1.0"

__all__ = [
    "Action", "BehaviorFeature", "CmaConfig", "CmaEmitter", "CmaMeDriver", "Criterion",
    "DmeConfig", "DmeDriver", "EfmeConfig", "EfmeDriver", "EliteEntry", "EliteMap", "EnvConfig",
    "EvaluationResult", "Evaluator", "ExperimentConfig", "FeatureScheme", "Genome",
    "GenomeStore", "Level", "NetworkPolicy", "NetworkTopology", "ObsMode", "Run", "VmeConfig",
    "VmeDriver", "checkpoint", "evaluate_candidate", "feature_from_results", "feature_to_string",
    "init_genome", "load_config", "load_level_set", "mutate", "parse_config", "parse_feature",
    "parse_level", "reset", "restore", "run_episode", "run_parallel", "run_sequential", "step",
]
