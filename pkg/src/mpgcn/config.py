"""Run configuration: one TOML document covering every stage."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .clustering import ClusterTrainConfig
from .errors import ConfigError, GeneratorError
from .ingest import STEP_CHOICES
from .predictor import PredictorConfig
from .synth import CityConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class PathsConfig:
    # empty means "<out>/synth/<name>"
    rides: str = ""
    events: str = ""
    stops: str = ""


@dataclass
class IngestConfig:
    tau: int = 20
    step_minutes: int = 5
    min_records: int = 10
    min_active_span_days: int = 0


@dataclass
class GraphConfig:
    sigma: float | None = None


@dataclass
class OptimizeConfig:
    eps: float = 5
    cap: int = 50
    length: str = "hops"
    fraction: float = 1.0
    max_sweeps: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: CityConfig = field(default_factory=CityConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    graphs: GraphConfig = field(default_factory=GraphConfig)
    cluster: ClusterTrainConfig = field(default_factory=ClusterTrainConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def problems(self):
        out = []
        if self.jobs < 1:
            out.append("jobs must be >= 1")
        if self.ingest.tau < 0:
            out.append("ingest.tau must be non-negative")
        if self.ingest.step_minutes not in STEP_CHOICES:
            out.append(f"ingest.step_minutes must be one of {STEP_CHOICES}")
        if self.ingest.min_records < 0 or self.ingest.min_active_span_days < 0:
            out.append("ingest filter thresholds must be non-negative")
        if self.graphs.sigma is not None and self.graphs.sigma <= 0:
            out.append("graphs.sigma must be positive")
        if self.optimize.eps < 0:
            out.append("optimize.eps must be non-negative")
        if self.optimize.cap < 1:
            out.append("optimize.cap must be >= 1")
        if self.optimize.length not in ("hops", "metres"):
            out.append("optimize.length must be 'hops' or 'metres'")
        if not 0.0 <= self.optimize.fraction <= 1.0:
            out.append("optimize.fraction must lie in [0, 1]")
        if self.optimize.max_sweeps < 1:
            out.append("optimize.max_sweeps must be >= 1")
        for name, section in (("synth", self.synth), ("cluster", self.cluster), ("predictor", self.predictor)):
            try:
                section.validate()
            except (ConfigError, GeneratorError) as exc:
                out.append(f"{name}: {exc}")
        return out

    def validate(self):
        found = self.problems()
        if found:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(found))
        return self


SECTIONS = {
    "paths": PathsConfig,
    "synth": CityConfig,
    "ingest": IngestConfig,
    "graphs": GraphConfig,
    "cluster": ClusterTrainConfig,
    "predictor": PredictorConfig,
    "optimize": OptimizeConfig,
}
TUPLE_FIELDS = {("cluster", "hidden"), ("cluster", "theta")}


def _section(name, cls, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    values = {k: (tuple(v) if (name, k) in TUPLE_FIELDS else v) for k, v in values.items()}
    return replace(cls(), **values)


def from_dict(doc):
    doc = dict(doc)
    top = {k: doc.pop(k) for k in ("seed", "jobs") if k in doc}
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    parts = {name: _section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**top, **parts)


def load(path=None, seed=None, jobs=None, k=None):
    """Read a TOML config (or defaults) and apply command-line overrides."""
    doc = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(doc)
    if seed is not None:
        cfg.seed = int(seed)
    if jobs is not None:
        cfg.jobs = int(jobs)
    if k is not None:
        cfg.cluster = replace(cfg.cluster, n_clusters=int(k))
    return cfg


def sub_seed(root, name):
    """Stable per-stage seed derived from the root seed and a stage name."""
    h = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")
