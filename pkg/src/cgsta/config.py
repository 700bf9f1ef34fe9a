"""INI run configuration: [model], [train] and [data] sections.

Every key has a default; unknown sections or keys are rejected so a typo in
a sweep file fails loudly instead of silently running the default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_file: str = "train.csv"
    test_file: str = "test.csv"
    label_file: str = ""            # empty: labels sit in the test file's label column
    has_header: bool = True
    label_column: str = "label"
    drop_columns: str = ""          # comma-separated, e.g. a timestamp column
    fill_missing: bool = False

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.drop_columns.split(",") if c.strip())


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        try:
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "data": asdict(self.data)}

    def to_ini(self) -> str:
        lines = []
        for section, values in self.as_dict().items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOLS = {"1": True, "true": True, "yes": True, "on": True,
          "0": False, "false": False, "no": False, "off": False}


def _coerce(section: str, key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            return _BOOLS[text.lower()]
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def _apply(section: str, obj, items: dict):
    known = {f.name for f in fields(obj)}
    changes = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        changes[key] = _coerce(section, key, text, getattr(obj, key))
    return replace(obj, **changes)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, default_section="__none__")
    parser.optionxform = str   # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or RunConfig()
    for section in parser.sections():
        if section not in ("model", "train", "data"):
            raise ConfigError(f"unknown section [{section}]")
        items = dict(parser.items(section))
        setattr(cfg, section, _apply(section, getattr(cfg, section), items))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def override(cfg: RunConfig, section: str, key: str, value) -> RunConfig:
    """Copy of ``cfg`` with one key replaced (used by sweeps)."""
    new = RunConfig(cfg.model, cfg.train, cfg.data)
    setattr(new, section, _apply(section, getattr(new, section), {key: str(value)}))
    new.validate()
    return new


def benchmark_config() -> RunConfig:
    """Reduced widths and epochs sized for the single-core synthetic benchmark."""
    return RunConfig(ModelConfig(H=16, H_t=16, H_f=32), TrainConfig(epochs=5))
