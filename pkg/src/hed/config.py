"""Flat ``key = value`` run configuration.

Keys follow the parameter table of the method (embedding_size, n, epochs,
batch_size, hypergraph_convolution_dropout, L, alpha, beta, learning_rate,
ub_graph_convolution_dropout, l2_norm) plus dataset and run plumbing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .hypergraph import HypergraphConfig
from .training import ABLATIONS, AblationFlags, TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config", "SWEEP_KEYS"]


class ConfigError(ValueError):
    pass


def _real(s: str) -> float:
    return float(Fraction(s.strip())) if "/" in s else float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ks(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


DEFAULTS: dict[str, str] = {
    "dataset": "unnamed",
    "user_bundle": "",
    "user_item": "",
    "bundle_item": "",
    "user_bundle_test": "",
    "n_users": "0",
    "n_items": "0",
    "n_bundles": "0",
    "train_fraction": "0.8",
    "embedding_size": "64",
    "n": "10",
    "epochs": "300",
    "batch_size": "1024",
    "hypergraph_convolution_dropout": "0.2",
    "L": "2",
    "alpha": "1/2",
    "beta": "1/100",
    "learning_rate": "5e-3",
    "ub_graph_convolution_dropout": "0.01",
    "l2_norm": "0.1",
    "negatives_per_positive": "1",
    "layer_scheme": "literal",
    "ii_mode": "zero",
    "init_std": "0.01",
    "seed": "0",
    "ks": "20,40,80",
    "eval_every": "1",
    "eval_k": "20",
    "ablate": "hed",
    "use_cache": "true",
    "out": "runs/default",
}

PATH_KEYS = ("user_bundle", "user_item", "bundle_item", "user_bundle_test", "out")

# sweep parameter name -> config key
SWEEP_KEYS = {
    "d": "embedding_size",
    "n": "n",
    "alpha": "alpha",
    "beta": "beta",
    "learning_rate": "learning_rate",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


@dataclass(frozen=True)
class RunConfig:
    raw: dict[str, str]
    base_dir: Path = field(default=Path("."))

    # --- construction -------------------------------------------------------

    @classmethod
    def from_values(cls, values: dict[str, str], base_dir=".") -> "RunConfig":
        raw = dict(DEFAULTS)
        raw.update(values)
        cfg = cls(raw, Path(base_dir))
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown override key(s): {sorted(unknown)}")
        raw = dict(self.raw)
        raw.update(overrides)
        cfg = replace(self, raw=raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.hypergraph
            self.train
            self.flags
            self.ks
            self.counts
            _bool(self.raw["use_cache"])
            frac = _real(self.raw["train_fraction"])
        except (ValueError, TypeError, ZeroDivisionError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0 < frac <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")

    def check_inputs(self) -> None:
        """Referenced data files must exist before anything is written."""
        for key in ("user_bundle", "user_item", "bundle_item"):
            if not self.raw[key]:
                raise ConfigError(f"missing required key {key!r}")
        for key in ("user_bundle", "user_item", "bundle_item", "user_bundle_test"):
            if self.raw[key] and not self.path(key).is_file():
                raise ConfigError(f"{key}: file not found: {self.path(key)}")
        if min(self.counts) <= 0:
            raise ConfigError("n_users, n_items and n_bundles must be positive")

    # --- typed views --------------------------------------------------------

    def path(self, key: str) -> Path:
        p = Path(self.raw[key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path("out")

    @property
    def counts(self) -> tuple[int, int, int]:
        return int(self.raw["n_users"]), int(self.raw["n_items"]), int(self.raw["n_bundles"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def train_fraction(self) -> float:
        return _real(self.raw["train_fraction"])

    @property
    def use_cache(self) -> bool:
        return _bool(self.raw["use_cache"])

    @property
    def ks(self) -> tuple[int, ...]:
        ks = _ks(self.raw["ks"])
        if not ks:
            raise ConfigError("ks must list at least one cutoff")
        return ks

    @property
    def hypergraph(self) -> HypergraphConfig:
        return HypergraphConfig(n_threshold=int(self.raw["n"]), ii_mode=self.raw["ii_mode"])

    @property
    def flags(self) -> AblationFlags:
        name = self.raw["ablate"].lower()
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return ABLATIONS[name]

    @property
    def train(self) -> TrainConfig:
        r = self.raw
        return TrainConfig(
            learning_rate=_real(r["learning_rate"]),
            weight_decay=_real(r["l2_norm"]),
            epochs=int(r["epochs"]),
            batch_size=int(r["batch_size"]),
            negatives_per_positive=int(r["negatives_per_positive"]),
            hypergraph_dropout=_real(r["hypergraph_convolution_dropout"]),
            ub_dropout=_real(r["ub_graph_convolution_dropout"]),
            seed=self.seed,
            layer_scheme=r["layer_scheme"],
            dim=int(r["embedding_size"]),
            alpha=_real(r["alpha"]),
            beta=_real(r["beta"]),
            n_layers=int(r["L"]),
            init_std=_real(r["init_std"]),
            eval_every=int(r["eval_every"]),
            eval_k=int(r["eval_k"]),
        )

    def canonical_text(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in sorted(self.raw) if k != "out")

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(self.canonical_text() + f"out={self.raw['out']}\n")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), str(path))
    return RunConfig.from_values(values, path.parent)
