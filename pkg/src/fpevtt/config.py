"""Run configuration stored as ``key=value`` lines.

Keys carry a section prefix: ``model.`` for architecture fields, ``train.``
for optimisation fields and ``data.`` for paths and tokenizer settings. The
only unprefixed key is ``seed``. Values are parsed according to the type of
the field they set; ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import RewardSpec
from .model import ConfigError, ModelConfig
from .training import TrainRunConfig

REWARD_KEYS = ("lambda_cider", "lambda_bleu4", "n_samples")


@dataclass
class DataConfig:
    manifest: str | None = None
    splits: str | None = None
    vocab: str | None = None
    tokenizer: str = "default"
    vocab_cap: int = 12000
    embeddings: str | None = None
    freeze_embeddings: bool = True
    train_split: str = "train"
    val_split: str = "val"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def check(self) -> None:
        """Reject combinations the pipeline cannot run."""
        if self.model.pe_mode in ("fpe", "naive_fusion") and not self.train.use_audio:
            raise ConfigError(
                f"pe_mode={self.model.pe_mode} fuses vision with audio but train.use_audio is false"
            )
        if self.data.tokenizer not in ("default", "wordpiece"):
            raise ConfigError(f"unknown tokenizer {self.data.tokenizer!r}")
        if self.data.tokenizer == "wordpiece" and not self.data.vocab:
            raise ConfigError("a wordpiece tokenizer needs data.vocab pointing at its piece list")
        if self.train.batch_size < 1 or self.train.scst_batch_size < 1:
            raise ConfigError("batch sizes must be at least 1")


def _parse(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("none", "null", ""):
            return None
        return _parse(raw, args[0], key)
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {hint.__name__}") from None
    return raw


def _fields(obj) -> dict[str, object]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with ``section.key -> raw value`` pairs applied."""
    sections = {
        "model": dataclasses.asdict(cfg.model),
        "train": {f.name: getattr(cfg.train, f.name) for f in dataclasses.fields(cfg.train)},
        "data": dataclasses.asdict(cfg.data),
    }
    reward = dataclasses.asdict(cfg.train.reward)
    seed = cfg.seed
    hints = {
        "model": _fields(cfg.model),
        "train": _fields(cfg.train),
        "data": _fields(cfg.data),
    }
    reward_hints = _fields(cfg.train.reward)
    for key, raw in pairs.items():
        if key == "seed":
            seed = _parse(raw, int, key)
            continue
        if key == "train.seed":
            raise ConfigError("set the top-level 'seed' key instead of train.seed")
        section, _, name = key.partition(".")
        if section == "train" and name in REWARD_KEYS:
            reward[name] = _parse(raw, reward_hints[name], key)
        elif section in sections and name in hints[section] and name != "reward":
            sections[section][name] = _parse(raw, hints[section][name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = dict(sections["train"], reward=RewardSpec(**reward), seed=seed)
        return RunConfig(
            model=ModelConfig(**sections["model"]),
            train=TrainRunConfig(**train),
            data=DataConfig(**sections["data"]),
            seed=seed,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``--set`` overrides, then ``--seed``."""
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        pairs.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    if seed is not None:
        pairs["seed"] = str(seed)
    cfg = apply_overrides(RunConfig(), pairs)
    cfg.check()
    return cfg


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_lines(cfg: RunConfig) -> list[str]:
    lines = [f"seed={cfg.seed}"]
    for name, value in dataclasses.asdict(cfg.model).items():
        lines.append(f"model.{name}={_fmt(value)}")
    for f in dataclasses.fields(cfg.train):
        if f.name == "seed":
            continue
        if f.name == "reward":
            for rk in REWARD_KEYS:
                lines.append(f"train.{rk}={_fmt(getattr(cfg.train.reward, rk))}")
        else:
            lines.append(f"train.{f.name}={_fmt(getattr(cfg.train, f.name))}")
    for name, value in dataclasses.asdict(cfg.data).items():
        lines.append(f"data.{name}={_fmt(value)}")
    return lines


def write_config(path, cfg: RunConfig) -> None:
    """Write every resolved key so the file reloads to an equal config."""
    Path(path).write_text("\n".join(config_lines(cfg)) + "\n", encoding="utf-8")
