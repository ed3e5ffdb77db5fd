"""Pipeline configuration file (TOML) with full-scale default values."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .artifacts import digest
from .errors import ConfigurationError

DEFAULTS = {
    "seed": 0,
    "paths": {
        "health_csv": "health.csv",
        "geojson": "neighborhoods.geojson",
        "geojson_crs": "EPSG:4326",
        "cache_dir": "cache",
        "output_dir": "out",
    },
    "plan": {"quota_overrides": [], "max_attempts": 300, "months": "5-9", "replacement": True, "workers": 1},
    "provider": {
        "kind": "mock",
        "rate_limit": 10.0,
        "coverage": 0.8,
        "official_rate": 0.9,
        "metadata_url": "https://maps.googleapis.com/maps/api/streetview/metadata",
        "image_url": "https://maps.googleapis.com/maps/api/streetview",
        "official_copyright": "Google",
    },
    "split": {"train_frac": 0.70, "val_frac": 0.15, "test_frac": 0.15, "stratify": False, "by_neighborhood": False},
    # Best DeiT setting reported for the full-scale run.
    "train": {
        "family": "vit_deit", "variant": "base", "unfrozen_layers": 5, "optimizer": "sgd",
        "learning_rate": 0.001, "dropout_p": 0.2, "l2_lambda": 0.0001, "max_epochs": 100,
        "patience": 10, "batch_size": 32, "pretrained": True,
    },
    "tune": {
        "epochs": 15, "train_frac": 0.30, "val_frac": 0.10, "use_best": False,
        "grid": {
            "variant": ["tiny", "small", "base"], "unfrozen_layers": [0, 1, 3, 5],
            "learning_rate": [0.01, 0.005, 0.001], "optimizer": ["adam", "sgd", "adagrad"],
        },
    },
    "explain": {
        "top_k": 10, "background": 50, "shap_samples": 200, "discard_ratio": 0.8,
        "fusion": "mean", "shap_output": "logits", "split": "test",
    },
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    open_section = where in ("train", "tune.grid")
    for key, value in override.items():
        sub = f"{where}.{key}" if where else key
        if key not in base and not open_section:
            raise ConfigurationError(f"unknown configuration key {sub}")
        if sub == "tune.grid":
            out[key] = dict(value)
        elif isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, sub)
        else:
            out[key] = value
    return out


@dataclass
class PipelineConfig:
    data: dict
    root: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"configuration file {path} not found")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
        return cls(_merge(DEFAULTS, raw), path.resolve().parent)

    @classmethod
    def from_dict(cls, raw: dict, root=".") -> "PipelineConfig":
        return cls(_merge(DEFAULTS, raw), Path(root).resolve())

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.root / p

    def validate_inputs(self) -> None:
        for key in ("health_csv", "geojson"):
            if not self.path(key).exists():
                raise ConfigurationError(f"paths.{key} = {self.path(key)} does not exist")

    def section_hash(self, *sections) -> str:
        return digest({s: self.data[s] for s in sections} | {"seed": self.seed})

    @property
    def hash(self) -> str:
        return digest(self.data)
