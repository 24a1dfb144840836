"""Configuration, persistence, and the command line experiment stages."""

from .cache import read_offline_cache, write_offline_cache
from .config import ExperimentConfig, config_hash, load_config, save_config
from .experiments import load_or_build_hierarchy

__all__ = [
    "ExperimentConfig", "config_hash", "load_config", "save_config",
    "read_offline_cache", "write_offline_cache", "load_or_build_hierarchy",
]
