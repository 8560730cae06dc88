"""Flat experiment configuration files and run manifests.

Config files are TOML restricted to scalars and arrays under dotted keys, e.g.
``dit.layers = 4``; nested tables are flattened back to dotted names on load.
"""
from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXPERIMENT_KINDS = ("ab_loss", "id_compare", "train_ae", "train_dit", "train_upsampler", "compress_table")
TOP_LEVEL = ("experiment", "seeds", "out_dir", "steps")


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, name + "."))
        else:
            out[name] = v
    return out


def load_flat(path) -> dict:
    with open(path, "rb") as fh:
        return flatten(tomllib.load(fh))


def config_hash(flat: dict) -> str:
    blob = json.dumps(flat, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    steps: int = 100
    modules: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.steps < 1:
            raise ValueError("step budget must be positive")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_flat(cls, flat: dict, kind: str | None = None) -> "ExperimentConfig":
        modules: dict = {}
        for key, value in flat.items():
            if key in TOP_LEVEL:
                continue
            section, _, name = key.partition(".")
            if not name:
                raise ValueError(f"config key {key!r} must be dotted (section.name)")
            modules.setdefault(section, {})[name] = value
        return cls(kind or flat.get("experiment", ""), list(flat.get("seeds", [0])),
                   str(flat.get("out_dir", "runs")), int(flat.get("steps", 100)), modules)

    @classmethod
    def load(cls, path, kind: str | None = None) -> "ExperimentConfig":
        return cls.from_flat(load_flat(path), kind)

    def section(self, name: str) -> dict:
        return dict(self.modules.get(name, {}))

    def to_flat(self) -> dict:
        flat = {"experiment": self.kind, "seeds": list(self.seeds), "out_dir": self.out_dir, "steps": self.steps}
        for section, values in self.modules.items():
            for k, v in values.items():
                flat[f"{section}.{k}"] = v
        return flat

    def hash(self) -> str:
        return config_hash(self.to_flat())


def versions() -> dict:
    import numpy
    import scipy

    from .. import __version__

    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "fsv": __version__}


def write_manifest(out_dir, config: ExperimentConfig, seed=None, extra: dict | None = None) -> Path:
    """JSON run manifest; deliberately free of timestamps so reruns compare equal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": config.to_flat(), "config_hash": config.hash(), "seed": seed,
           "versions": versions()}
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
