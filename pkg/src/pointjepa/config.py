"""Run configuration in a flat ``section.key = value`` dialect.

Grammar, one assignment per line::

    # comment
    model.dim = 64
    mask.target_ratio = (0.15, 0.2)
    mask.strategy = multi-block
    data.rotate = true

Values are Python literals (ints, floats, tuples, quoted strings); ``true`` and
``false`` are booleans and anything else is taken as a bare string. Unknown
sections or keys are rejected. Later assignments (and command-line overrides)
win over earlier ones.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field

from pointjepa.errors import ConfigError, InvalidArgument
from pointjepa.masking import MaskConfig, Strategy
from pointjepa.nn import ModelConfig
from pointjepa.sequencer import DEFAULT_BITS, SEQUENCERS
from pointjepa.train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    out_dir: str | None = None
    per_class: int = 107
    n_points: int = 1024
    split_ratio: float = 0.8
    jitter: float = 0.01
    rotate: bool = True


@dataclass(frozen=True)
class EvalConfig:
    reg: float = 1e-3
    fewshot_m: int = 5
    fewshot_n: int = 10
    fewshot_trials: int = 10


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    sequencer: str = "greedy-min-coord"
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must be an unsigned 64-bit integer")
        if self.sequencer not in SEQUENCERS:
            raise InvalidArgument(f"sequencer must be one of {SEQUENCERS}, got {self.sequencer!r}")
        if not 1 <= self.bits <= 21:
            raise InvalidArgument("bits must lie in [1, 21]")


# a predictor deeper than the encoder keeps the prediction work out of the encoder
DESK_MODEL = ModelConfig(c=16, k=16, dim=64, depth=2, heads=4, pred_dim=32, pred_depth=4,
                         pred_heads=4, h1=64, h2=128, h3=256, pos_hidden=64)
# 512 of the default dataset's 516 training clouds, 16 steps per epoch at batch 32
DESK_TRAIN = TrainConfig(max_clouds=512)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = DESK_MODEL
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=lambda: DESK_TRAIN)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        """Training settings with the run seed applied."""
        return dataclasses.replace(self.train, seed=self.run.seed)


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if isinstance(default, tuple):
            if not isinstance(value, (tuple, list)):
                raise TypeError
            return tuple(float(v) for v in value)
        if isinstance(default, Strategy):
            return Strategy(str(value))
        if default is None or isinstance(default, str):
            return None if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return value


def _section_default(name: str):
    f = SECTIONS[name]
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def build_config(assignments: dict) -> RunConfig:
    """Apply ``{"section.key": raw_value}`` to the defaults, validating each section."""
    updates: dict = {name: {} for name in SECTIONS}
    for dotted, value in assignments.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        base = _section_default(section)
        known = {f.name for f in dataclasses.fields(base)}
        if key not in known or (section == "train" and key == "seed"):
            raise ConfigError(f"unknown config key {dotted!r}")
        updates[section][key] = _coerce(dotted, value, getattr(base, key))
    sections = {}
    for name, upd in updates.items():
        try:
            sections[name] = dataclasses.replace(_section_default(name), **upd)
        except InvalidArgument as e:
            raise ConfigError(f"invalid [{name}] section: {e}") from e
    return RunConfig(**sections)


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    assignments = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {ln}: expected 'section.key = value'")
        assignments[key.strip()] = _parse_value(value)
    for key, value in (overrides or {}).items():
        assignments[key] = _parse_value(value) if isinstance(value, str) else value
    return build_config(assignments)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config_text(text, overrides)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, Strategy):
        return value.value
    if isinstance(value, tuple):
        return "(" + ", ".join(repr(v) for v in value) + ")"
    if isinstance(value, str):
        return value if value.strip() == value and value and _parse_value(value) == value else repr(value)
    return repr(value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            if name == "train" and f.name == "seed":
                continue
            lines.append(f"{name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
