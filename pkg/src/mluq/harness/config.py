"""Experiment configuration: flat INI files with typed sections.

Defaults reproduce the reference experiment setup: a 50x50/5x5 grid pair,
variance-2 squared-exponential covariance with five modes, the
(4, 8, 16) x (128, 32, 8) level plan, and the nine-point pressure survey
for the chain experiments.
"""

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass

from ..errors import ConfigurationError

_DEFAULT_POINTS = tuple((x, y) for y in (0.25, 0.5, 0.75) for x in (0.25, 0.5, 0.75))


@dataclass(frozen=True)
class ExperimentConfig:
    # [grid]
    nx_fine: int = 50
    ny_fine: int = 50
    nx_coarse: int = 5
    ny_coarse: int = 5
    # [covariance]
    sigma2: float = 2.0
    l1: float = 0.1
    l2: float = 0.1
    n_modes: int = 5
    # [spaces]
    n_snapshot_params: int = 10
    snapshots_per_param: int = 10
    offline_dim: int = 32
    level_dims: tuple = (4, 8, 16)
    # [mlmc]
    level_samples: tuple = (128, 32, 8)
    n_reference: int = 5000
    n_replicates: int = 10
    reference_solver: str = "level"  # finest-level online solves; "fine" for full grid
    # [mlmcmc]
    proposal_delta: float = 0.2
    n_final_accepts: int = 1000
    burn_in_accepts: int = 300
    sigma_scale: float = 0.05
    noise_sigma: float = 0.0
    reference_eta: str = "draw"  # or "zero" for the self-test
    points: tuple = _DEFAULT_POINTS
    # [seeds]
    prior_seed: int = 0
    snapshot_seed: int = 1
    chain_seed: int = 2
    reference_seed: int = 3
    # [output]
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "level_dims", tuple(int(d) for d in self.level_dims))
        object.__setattr__(self, "level_samples",
                           tuple(int(m) for m in self.level_samples))
        object.__setattr__(self, "points",
                           tuple((float(x), float(y)) for x, y in self.points))
        if len(self.level_dims) != len(self.level_samples):
            raise ConfigurationError(
                f"level_dims {self.level_dims} and level_samples "
                f"{self.level_samples} differ in length")
        if self.reference_solver not in ("level", "fine"):
            raise ConfigurationError(
                f"reference_solver must be 'level' or 'fine', got "
                f"{self.reference_solver!r}")
        if self.reference_eta not in ("draw", "zero"):
            raise ConfigurationError(
                f"reference_eta must be 'draw' or 'zero', got {self.reference_eta!r}")
        for name in ("n_reference", "n_replicates", "n_final_accepts", "workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.burn_in_accepts < 0:
            raise ConfigurationError("burn_in_accepts must be >= 0")
        if not self.points:
            raise ConfigurationError("need at least one measurement point")


_SCHEMA = {
    "grid": {"nx_fine": int, "ny_fine": int, "nx_coarse": int, "ny_coarse": int},
    "covariance": {"sigma2": float, "l1": float, "l2": float, "n_modes": int},
    "spaces": {"n_snapshot_params": int, "snapshots_per_param": int,
               "offline_dim": int, "level_dims": "ints"},
    "mlmc": {"level_samples": "ints", "n_reference": int, "n_replicates": int,
             "reference_solver": str},
    "mlmcmc": {"proposal_delta": float, "n_final_accepts": int,
               "burn_in_accepts": int, "sigma_scale": float, "noise_sigma": float,
               "reference_eta": str, "points": "points"},
    "seeds": {"prior_seed": int, "snapshot_seed": int, "chain_seed": int,
              "reference_seed": int},
    "output": {"out_dir": str, "workers": int},
}


def _parse_ints(text):
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _parse_points(text):
    points = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigurationError(f"bad measurement point {chunk!r}")
        points.append((float(parts[0]), float(parts[1])))
    return tuple(points)


def load_config(path):
    """Read an INI experiment file; unknown sections or keys are rejected."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigurationError(
                    f"unknown key '{key}' in section [{section}] of {path}")
            try:
                if kind == "ints":
                    values[key] = _parse_ints(raw)
                elif kind == "points":
                    values[key] = _parse_points(raw)
                else:
                    values[key] = kind(raw)
            except (ValueError, ConfigurationError) as exc:
                raise ConfigurationError(
                    f"bad value for '{key}' in [{section}] of {path}: {exc}") from exc
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(f"invalid config {path}: {exc}") from exc


def save_config(config, path):
    """Write the full configuration, one section per dataclass group."""
    parser = configparser.ConfigParser()
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, kind in keys.items():
            value = getattr(config, key)
            if kind == "ints":
                text = " ".join(str(v) for v in value)
            elif kind == "points":
                text = "; ".join(f"{x} {y}" for x, y in value)
            else:
                text = str(value)
            parser[section][key] = text
    with open(path, "w") as fh:
        parser.write(fh)


def config_hash(config):
    """Stable digest of every field, for manifests and cache compatibility."""
    parts = []
    for field in dataclasses.fields(config):
        parts.append(f"{field.name}={getattr(config, field.name)!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def space_compat_key(config):
    """The subset of fields an offline cache must agree on."""
    keys = ("nx_fine", "ny_fine", "nx_coarse", "ny_coarse", "sigma2", "l1", "l2",
            "n_modes", "n_snapshot_params", "snapshots_per_param", "offline_dim",
            "level_dims", "snapshot_seed")
    text = "\n".join(f"{k}={getattr(config, k)!r}" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()
