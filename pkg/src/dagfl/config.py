"""Experiment configuration: flat dotted keys, INI files, ``key=value`` overrides."""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Iterable

FRAMEWORK_ALIASES = {"dag": "dag", "ironforge": "dag", "google": "google", "async": "async", "block": "block"}

DEFAULTS: dict[str, object] = {
    "framework": "dag",
    "seed": 0,
    "iterations": 200,
    "runners": 12,
    "max_ticks": 100000,
    "output_dir": "",
    "data.dataset": "digits",
    "data.train_fraction": 0.7,
    "data.shard_size": 100,
    "data.validation_size": 100,
    "model.arch": "mlp",
    "model.hidden": 64,
    "model.epochs": 5,
    "model.lr": 0.05,
    "model.batch_size": 25,
    "worker.beta": 6,
    "worker.sigma": 5,
    "worker.eta": 30,
    "worker.idle_prob": 0.1,
    "settlement.interval": 20,
    "settlement.committee_size": 7,
    "settlement.reward": 1,
    "settlement.initial_balance": 1000,
    "settlement.max_attempts": 5,
    "pol.enabled": True,
    "pol.sigma": 1e-8,
    "pol.epsilon": 0.0,
    "pol.deposit": 2,
    "pol.refund_fraction": 0.5,
    "pol.timeout_intervals": 2,
    "pol.audit_fraction": 1.0,
    "pol.calibration_trials": 20,
    "adversary.poisoning": 0.0,
    "adversary.backdoor": 0.0,
    "adversary.stealing": 0.0,
    "adversary.colluding": 0.0,
    "adversary.lazy": 0.0,
    "adversary.attack_prob": 1.0,
    "adversary.backdoor_target": 0,
    "adversary.patch_size": 2,
    "adversary.backdoor_fraction": 0.5,
    "profile.cpu": "1.0",
    "profile.bandwidth": "200000",
    "profile.memory": "6",
    "cost.train": 0.004,
    "cost.eval": 0.001,
    "baseline.timeout": 12,
    "baseline.async_weight": 0.5,
    "baseline.miners": 5,
    "baseline.difficulty": 4.0,
    "baseline.block_reward": 10,
    "metrics.eval_every": 10,
    "metrics.final_window": 5,
}

TOP_SECTION = "experiment"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if isinstance(default, bool):
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError(text)
                return low in ("true", "1", "yes", "on")
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError:
            raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}") from None
        return text
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, float) and isinstance(raw, int):
        return float(raw)
    if isinstance(default, str):
        if isinstance(raw, (list, tuple)):
            return ",".join(str(v) for v in raw)
        return str(raw)
    if not isinstance(raw, type(default)):
        raise ConfigError(key, f"expected {type(default).__name__}, got {raw!r}")
    return raw


def _list(text: str, cast) -> list:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return [cast(p) for p in parts]


class ExperimentConfig:
    """Validated mapping of dotted keys; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)
        self.validate()

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")
        self._values[key] = _coerce(key, raw)

    def __getitem__(self, key: str):
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    def replace(self, **changes) -> "ExperimentConfig":
        values = self.as_dict()
        values.update({k.replace("__", "."): v for k, v in changes.items()})
        return ExperimentConfig(values)

    def with_values(self, changes: dict) -> "ExperimentConfig":
        values = self.as_dict()
        values.update(changes)
        return ExperimentConfig(values)

    @property
    def framework(self) -> str:
        return FRAMEWORK_ALIASES[self["framework"]]

    def profile_list(self, name: str) -> list[float]:
        values = _list(self[f"profile.{name}"], float)
        n = self["runners"]
        return [values[i % len(values)] for i in range(n)]

    def adversary_fractions(self) -> dict[str, float]:
        kinds = ("poisoning", "backdoor", "stealing", "colluding", "lazy")
        return {k: self[f"adversary.{k}"] for k in kinds if self[f"adversary.{k}"] > 0}

    def validate(self) -> None:
        v = self._values
        if v["framework"] not in FRAMEWORK_ALIASES:
            raise ConfigError("framework", f"expected one of {sorted(FRAMEWORK_ALIASES)}")
        for key in ("iterations", "max_ticks"):
            if v[key] < 0:
                raise ConfigError(key, "must be non-negative")
        positive = ("runners", "data.shard_size", "data.validation_size", "model.epochs", "model.batch_size",
                    "model.hidden", "settlement.interval", "settlement.committee_size", "settlement.max_attempts",
                    "baseline.miners", "baseline.timeout", "metrics.eval_every", "metrics.final_window")
        for key in positive:
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("model.lr", "cost.train", "cost.eval"):
            if v[key] <= 0:
                raise ConfigError(key, "must be positive")
        if not 0 < v["data.train_fraction"] < 1:
            raise ConfigError("data.train_fraction", "must lie in (0, 1)")
        if not 1 <= v["worker.sigma"] <= v["worker.beta"] <= v["worker.eta"]:
            raise ConfigError("worker.sigma", "need 1 <= sigma <= beta <= eta")
        for key in ("worker.idle_prob", "pol.audit_fraction", "adversary.attack_prob", "adversary.backdoor_fraction"):
            if not 0 <= v[key] <= 1:
                raise ConfigError(key, "must lie in [0, 1]")
        if not 0 < v["pol.refund_fraction"] < 1:
            raise ConfigError("pol.refund_fraction", "must lie in (0, 1)")
        if v["pol.sigma"] < 0 or v["pol.epsilon"] < 0 or v["pol.deposit"] < 0:
            raise ConfigError("pol", "sigma, epsilon and deposit must be non-negative")
        if v["pol.timeout_intervals"] < 1:
            raise ConfigError("pol.timeout_intervals", "must be >= 1")
        if not 0 < v["baseline.async_weight"] <= 1:
            raise ConfigError("baseline.async_weight", "must lie in (0, 1]")
        if v["baseline.difficulty"] < 1:
            raise ConfigError("baseline.difficulty", "must be >= 1")
        if sum(self.adversary_fractions().values()) > 1:
            raise ConfigError("adversary", "fractions sum above 1")
        for name in ("cpu", "bandwidth", "memory"):
            try:
                vals = _list(v[f"profile.{name}"], float)
            except ValueError:
                raise ConfigError(f"profile.{name}", "expected a comma-separated list of numbers") from None
            if any(x <= 0 for x in vals):
                raise ConfigError(f"profile.{name}", "values must be positive")
            if name == "memory" and any(x < 1 for x in vals):
                raise ConfigError("profile.memory", "memory cap must be >= 1")


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file; keys in section ``[x]`` become ``x.key`` (``[experiment]`` is top level)."""
    values: dict[str, object] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser.items(section):
                full = key if section == TOP_SECTION else f"{section}.{key}"
                if full not in DEFAULTS:
                    raise ConfigError(full, "unknown key")
                values[full] = raw
    values.update(overrides or {})
    return ExperimentConfig(values)


def render_config(cfg: ExperimentConfig) -> str:
    sections: dict[str, list[tuple[str, object]]] = {}
    for key, value in cfg.as_dict().items():
        section, _, name = key.rpartition(".")
        sections.setdefault(section or TOP_SECTION, []).append((name, value))
    lines = []
    for section, items in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in items)
        lines.append("")
    return "\n".join(lines)
