"""Strict dict -> dataclass loading for JSON configs, and the run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, DomainError

ENV_SEED = "BPRVI_SEED"
ENV_THREADS = "BPRVI_THREADS"


def strict_kwargs(cls, d: dict, what: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{what}: expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{what}: unknown field(s) {', '.join(unknown)}")
    return dict(d)


def _build(cls, d, what):
    try:
        return cls(**strict_kwargs(cls, d, what))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


@dataclass
class ColumnRoles:
    """Which CSV columns feed which part of the model."""

    mixture: list
    response: list = field(default_factory=list)
    outcome: Optional[str] = None
    strata: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        if not self.mixture:
            raise ConfigError("columns: at least one mixture column is required")
        named = list(self.mixture) + list(self.response)
        named += [c for c in (self.outcome, self.strata, self.id) if c is not None]
        dup = sorted({c for c in named if named.count(c) > 1})
        if dup:
            raise ConfigError(f"columns: listed under more than one role: {', '.join(dup)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    """Everything a command needs; validated before any computation.

    ``reference_profiles`` maps a profile name to ``{response column: value}``;
    unlisted columns are zero (e.g. centred age at its mean).
    """

    model: object = None
    svi: object = None
    mcmc: object = None
    simulation: object = None
    columns: Optional[ColumnRoles] = None
    reference_profiles: dict = field(default_factory=dict)
    n_draws: int = 1000
    mass: float = 0.95
    nonempty_threshold: float = 1.0
    n_jobs: int = 1
    seed: Optional[int] = None
    threads: Optional[int] = None

    def __post_init__(self):
        from .mcmc import McmcConfig
        from .model import ModelConfig
        from .simulation import SimulationSpec
        from .svi import SviConfig

        self.model = self.model or ModelConfig()
        self.svi = self.svi or SviConfig()
        self.mcmc = self.mcmc or McmcConfig()
        self.simulation = self.simulation or SimulationSpec(m=5)
        if self.n_draws < 100:
            raise ConfigError("n_draws must be >= 100 (interval estimates need them)")
        if not 0.0 < self.mass < 1.0:
            raise ConfigError("mass must lie in (0, 1)")
        if self.nonempty_threshold <= 0:
            raise ConfigError("nonempty_threshold must be positive")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not isinstance(self.reference_profiles, dict):
            raise ConfigError("reference_profiles must map names to {column: value} objects")
        for name, prof in self.reference_profiles.items():
            if not isinstance(prof, dict):
                raise ConfigError(f"reference_profiles.{name}: expected an object of column values")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .mcmc import McmcConfig
        from .model import ModelConfig
        from .simulation import SimulationSpec
        from .svi import SviConfig

        d = strict_kwargs(cls, d, "config")
        sections = {"model": ModelConfig, "svi": SviConfig, "mcmc": McmcConfig,
                    "simulation": SimulationSpec, "columns": ColumnRoles}
        for key, sub in sections.items():
            if d.get(key) is not None:
                body = dict(d[key])
                if key == "model":
                    for k in ("alpha_bounds", "beta_prior"):
                        if k in body:
                            body[k] = tuple(body[k])
                d[key] = _build(sub, body, key)
        try:
            return cls(**d)
        except (TypeError, DomainError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                val = dataclasses.asdict(val)
            out[f.name] = val
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def reference_vectors(self, w_names) -> dict:
        """Reference profiles as vectors over ``w_names``."""
        import numpy as np

        out = {}
        for name, prof in self.reference_profiles.items():
            unknown = sorted(set(prof) - set(w_names))
            if unknown:
                raise ConfigError(f"reference_profiles.{name}: unknown response column(s) {', '.join(unknown)}")
            out[name] = np.array([float(prof.get(w, 0.0)) for w in w_names])
        return out or None


def _env_int(name: str) -> Optional[int]:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc


def resolve_seed(cli: Optional[int], cfg: RunConfig) -> Optional[int]:
    """Command-line flag, then environment, then the config file."""
    if cli is not None:
        return cli
    env = _env_int(ENV_SEED)
    return env if env is not None else cfg.seed


def resolve_threads(cli: Optional[int], cfg: RunConfig) -> Optional[int]:
    if cli is not None:
        return cli
    env = _env_int(ENV_THREADS)
    return env if env is not None else cfg.threads
