"""Flat ``key = value`` pipeline configuration with dotted keys.

Values are parsed as JSON when possible (numbers, booleans, lists, quoted
strings, ``null``) and taken as bare strings otherwise. Lines starting with
``#`` are comments. Command-line flags override file values.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError

# key -> (default, kind)
FIELDS = {
    "paths.data": (None, "str?"),
    "paths.schema": (None, "str?"),
    "paths.workdir": ("run", "str"),
    "seed": (0, "int"),
    "threads": (1, "int"),
    "schedule.beta_min": (0.1, "float"),
    "schedule.beta_max": (20.0, "float"),
    "schedule.n_steps": (1000, "int"),
    "schedule.t_eps": (1e-3, "float"),
    "network.score_hidden": ([256, 256, 256], "ints"),
    "network.classifier_hidden": ([128, 128], "ints"),
    "network.score_scaling": ("none", "str"),
    "meta.alpha_score": (1e-3, "float"),
    "meta.alpha_y": (1e-3, "float"),
    "meta.alpha_z": (1e-3, "float"),
    "meta.beta_score": (1.0, "float"),
    "meta.beta_y": (1.0, "float"),
    "meta.beta_z": (1.0, "float"),
    "meta.gamma_score": (1e-3, "float"),
    "meta.gamma_y": (1e-3, "float"),
    "meta.gamma_z": (1e-3, "float"),
    "train.iterations": (2000, "int"),
    "train.batch_size": (256, "int"),
    "train.optimizer": ("sgd", "str"),
    "train.exact": (False, "bool"),
    "train.ema_decay": (None, "float?"),
    "train.checkpoint_every": (500, "int"),
    "train.exclude_domains": ([], "strs"),
    "guidance.lambda_y": (1.0, "float"),
    "guidance.lambda_z": (1.0, "float"),
    "guidance.clip": (True, "bool"),
    "sample.num_samples": (None, "int?"),
    "sample.label_policy": ("prior", "str"),
    "eval.hidden": (64, "int"),
    "eval.epochs": (200, "int"),
    "eval.batch_size": (128, "int"),
    "eval.learning_rate": (1e-3, "float"),
    "eval.validation_fraction": (0.1, "float"),
    "eval.patience": (20, "int"),
    "lodo.budget": (None, "int?"),
    "lodo.n_samples": (None, "int?"),
}


def _coerce(key, value):
    default, kind = FIELDS[key]
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be null")
    try:
        if base == "int":
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if base == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if base == "bool":
            if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
                return value.lower() in ("true", "yes", "1")
            if isinstance(value, bool):
                return value
            raise ValueError
        if base == "str":
            return str(value)
        if base == "ints":
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return [int(v) for v in value]
        if base == "strs":
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return [str(v) for v in value]
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{key}: cannot read {value!r} as {kind}")


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class PipelineConfig:
    """All pipeline settings as a flat mapping of dotted keys."""

    def __init__(self, values=None):
        self.values = {k: v[0] for k, v in FIELDS.items()}
        self.values["network.score_hidden"] = list(self.values["network.score_hidden"])
        self.values["network.classifier_hidden"] = list(self.values["network.classifier_hidden"])
        self.values["train.exclude_domains"] = []
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_text(cls, text, source="<config>"):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                cfg.set(key, parse_value(value))
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        return cls.from_text(text, str(path))

    def set(self, key, value):
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, value)
        if key == "seed" and not 0 <= value < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if key == "threads" and value < 1:
            raise ConfigError("threads must be >= 1")
        self.values[key] = value

    def override(self, key, value):
        """Apply a command-line value; ``None`` means the flag was not given."""
        if value is not None:
            self.set(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def to_text(self):
        return "".join(f"{k} = {json.dumps(self.values[k])}\n" for k in sorted(self.values))

    def generator_params(self):
        """Keyword arguments for :class:`fairdiff.estimator.FairDiffusionGenerator`."""
        sched = self.section("schedule")
        params = {
            "score_hidden": tuple(self["network.score_hidden"]),
            "classifier_hidden": tuple(self["network.classifier_hidden"]),
            "score_scaling": self["network.score_scaling"],
            "beta_min": sched["beta_min"],
            "beta_max": sched["beta_max"],
            "n_steps": sched["n_steps"],
            "t_eps": sched["t_eps"],
            "iterations": self["train.iterations"],
            "batch_size": self["train.batch_size"],
            "optimizer": self["train.optimizer"],
            "exact_meta": self["train.exact"],
            "ema_decay": self["train.ema_decay"],
            "lambda_y": self["guidance.lambda_y"],
            "lambda_z": self["guidance.lambda_z"],
            "clip_guidance": self["guidance.clip"],
            "label_policy": self["sample.label_policy"],
            "n_jobs": self["threads"],
        }
        params.update(self.section("meta"))
        return params

    def downstream_params(self):
        return self.section("eval")


STREAMS = {"train": 0, "sample": 1, "eval": 2, "lodo": 3}


def substream_seed(seed, name):
    """Integer seed of the named random substream derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],))
    return int(ss.generate_state(1, np.uint64)[0])
