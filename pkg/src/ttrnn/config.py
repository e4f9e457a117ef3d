"""Run configuration: a flat ``key=value`` text format with typed fields."""
from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    cell: str = "lstm"              # lstm | gru
    param: str = "tt-fused"         # dense | tt-sep | tt-fused
    hidden: int = 64
    input: int = 14
    cores: int = 2
    rank: int = 4
    rank0: int = 0                  # 0 means "same as rank"
    row_dims: str = ""              # e.g. "8x8"; empty -> balanced factorization
    col_dims: str = ""
    task: str = "toy"               # mnist | synth-speaker | toy
    classes: int = 10
    proj: int = 0                   # linear projection / embedding size (0 = none)
    emb: int = 32
    seed: int = 0
    epochs: int = 15
    lr: float = 1e-3
    lr_decay: float = 0.3
    patience: int = 4
    batch_size: int = 256
    shards: int = 1
    workers: int = 1
    forget_bias: float = 0.0
    # mnist
    downsample: int = 2
    step: str = "row"               # row | pixel
    permute_seed: int = -1          # -1 keeps the original pixel order
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    # synthetic speakers
    speakers: int = 20
    utterances: int = 10
    val_speakers: int = 20
    frames: int = 20
    sep: float = 0.5
    noise: float = 0.3
    ge2e_speakers: int = 8
    ge2e_utterances: int = 4
    steps_per_epoch: int = 20
    data_fraction: float = 1.0
    # bench
    repeats: int = 100
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.cell not in ("lstm", "gru"):
            raise ConfigError(f"cell must be lstm or gru, got {self.cell!r}")
        if self.param not in ("dense", "tt-sep", "tt-fused"):
            raise ConfigError(f"param must be dense, tt-sep or tt-fused, got {self.param!r}")
        if self.task not in ("mnist", "synth-speaker", "toy"):
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("hidden", "input", "cores", "rank", "epochs", "batch_size", "shards", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("data_fraction must lie in (0, 1]")

    @property
    def r0(self) -> int:
        return self.rank0 or self.rank

    def dims(self, which: str):
        text = self.row_dims if which == "row" else self.col_dims
        return [int(t) for t in text.split("x")] if text else None

    def tt_settings_changed(self) -> bool:
        defaults = {f.name: f.default for f in fields(RunConfig)}
        return any(getattr(self, k) != defaults[k] for k in ("cores", "rank", "rank0", "row_dims", "col_dims"))

    def warn_ignored(self):
        if self.param == "dense" and self.tt_settings_changed():
            warnings.warn("rank/core settings are ignored for dense cells", stacklevel=2)

    # -- text format -----------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def hash(self) -> str:
        keep = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("out", "workers")}
        text = "".join(f"{k}={v}\n" for k, v in sorted(keep.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        values = parse_kv(text)
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), overrides)


def parse_kv(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw
