"""Flat ``key=value`` run configuration with dotted keys (``model.mixer_depth=4``)."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "eval")

DATA_DEFAULTS = {"binarize": "none", "pad_value": 255, "mean": None, "std": None}
EVAL_DEFAULTS = {"whiten": True, "whiten_dim": 256, "labels": ["writer", "page"]}


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in s:
        return [parse_value(part) for part in s.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v) + ("," if len(v) == 1 else "")
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(value)
    return out


def load_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def dump(values: dict) -> str:
    return "".join(f"{k}={format_value(values[k])}\n" for k in sorted(values))


def _section(values: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}


def _coerce_fields(cls, raw: dict, section: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for k, v in raw.items():
        if k not in fields:
            raise ConfigError(f"unknown {section} option {section}.{k}")
        if k in ("backbone_stage_channels", "backbone_blocks_per_stage") and not isinstance(v, list):
            v = [v]
        out[k] = v
    return out


@dataclasses.dataclass
class RunConfig:
    values: dict
    seed: int
    out_dir: str | None = None

    @classmethod
    def build(cls, config_path=None, overrides: dict | None = None, seed: int | None = None, out_dir=None):
        values = load_file(config_path) if config_path else {}
        values.update(overrides or {})
        for key in values:
            if key.split(".", 1)[0] not in SECTIONS or "." not in key:
                raise ConfigError(f"config key {key!r} must start with one of {SECTIONS}")
        if seed is None:
            seed = values.get("train.seed", 0)
        values["train.seed"] = int(seed)
        return cls(values, int(seed), None if out_dir is None else str(out_dir))

    def model_config(self, **extra) -> ModelConfig:
        kwargs = _coerce_fields(ModelConfig, _section(self.values, "model"), "model")
        kwargs.update(extra)
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**_coerce_fields(TrainConfig, _section(self.values, "train"), "train"))

    def data_options(self) -> dict:
        opts = dict(DATA_DEFAULTS)
        raw = _section(self.values, "data")
        unknown = set(raw) - set(opts)
        if unknown:
            raise ConfigError(f"unknown data options: {sorted(unknown)}")
        opts.update(raw)
        if opts["binarize"] not in ("none", "sauvola"):
            raise ConfigError(f"data.binarize must be none or sauvola, got {opts['binarize']!r}")
        return opts

    def eval_options(self) -> dict:
        opts = dict(EVAL_DEFAULTS)
        raw = _section(self.values, "eval")
        unknown = set(raw) - set(opts)
        if unknown:
            raise ConfigError(f"unknown eval options: {sorted(unknown)}")
        opts.update(raw)
        if isinstance(opts["labels"], str):
            opts["labels"] = [opts["labels"]]
        return opts

    def resolved(self, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None) -> dict:
        """Every effective setting, defaults included, as flat dotted keys."""
        flat = {}
        if model_cfg is not None:
            flat.update({f"model.{k}": v for k, v in dataclasses.asdict(model_cfg).items()})
        if train_cfg is not None:
            flat.update({f"train.{k}": v for k, v in dataclasses.asdict(train_cfg).items()})
        flat.update({f"data.{k}": v for k, v in self.data_options().items()})
        flat.update({f"eval.{k}": v for k, v in self.eval_options().items()})
        flat.update(self.values)
        if model_cfg is not None:
            flat.update({f"model.{k}": v for k, v in dataclasses.asdict(model_cfg).items()})
        if train_cfg is not None:
            flat.update({f"train.{k}": v for k, v in dataclasses.asdict(train_cfg).items()})
        flat["run.seed"] = self.seed
        return flat

    def write(self, path, **kwargs) -> None:
        Path(path).write_text(dump(self.resolved(**kwargs)), encoding="utf-8")
