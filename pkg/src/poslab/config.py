"""Experiment configuration: a flat key = value text file, overridable by
command-line ``key=value`` pairs (overrides win). The exact configuration
used by a run is echoed into its directory so every artifact is
reproducible from (config, seed) alone.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .tasks import N_SPECIAL, REASONING, RETRIEVAL

OUTPUT_ROOT_ENV = "POSLAB_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    # task
    kind: str = RETRIEVAL
    seed: int = 0
    out_dir: str = "run"
    n_docs: int = 20
    vocab_size: int = 64
    # model
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_seq_len: int = 512
    rope_base: float = 10000.0
    # dataset
    train_size: int = 2000
    eval_size: int = 50
    records: int = 300
    # bias induction
    p_sink: float = 0.9
    induce_lr: float = 1e-3
    induce_batch_size: int = 16
    induce_max_steps: int = 4000
    induce_eval_every: int = 50
    induce_target_accuracy: float = -1.0  # negative = kind default (0.95 retrieval, 0.90 reasoning)
    induce_min_steps: int = 0
    # distillation (shared by r1 / r2 / sft / seqkd)
    k: int = 4
    anchor_weight: float = 1.0
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 1e-3
    use_align: bool = True
    use_anchor: bool = True
    filter_invalid: bool = True
    max_new: int = 0  # 0 = derive from kind (8 retrieval, 12 reasoning)
    # evaluation / reporting
    eval_positions: str = "1,5,10,15,20"
    figures: bool = True

    def __post_init__(self):
        if self.kind not in (RETRIEVAL, REASONING):
            raise ConfigError(f"kind must be retrieval or reasoning, got {self.kind!r}")
        if not 0.0 <= self.p_sink <= 1.0:
            raise ConfigError("p_sink must be in [0, 1]")
        if self.induce_target_accuracy > 1.0:
            raise ConfigError("induce_target_accuracy must be <= 1")
        for name in ("n_docs", "vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len",
                     "train_size", "eval_size", "records", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if 2 * self.n_docs > self.vocab_size - N_SPECIAL:
            raise ConfigError(
                f"n_docs {self.n_docs} needs {2 * self.n_docs} distinct symbols, "
                f"vocab_size {self.vocab_size} provides {self.vocab_size - N_SPECIAL}"
            )

    @property
    def decode_budget(self) -> int:
        if self.max_new > 0:
            return self.max_new
        return 8 if self.kind == RETRIEVAL else 12

    @property
    def target_accuracy(self) -> float:
        if self.induce_target_accuracy >= 0:
            return self.induce_target_accuracy
        return 0.95 if self.kind == RETRIEVAL else 0.90

    @property
    def positions(self) -> list[int]:
        try:
            out = [int(p) for p in self.eval_positions.split(",") if p.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad eval_positions {self.eval_positions!r}") from exc
        if not out:
            raise ConfigError("eval_positions is empty")
        return out

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                vocab_size=self.vocab_size,
                d_model=self.d_model,
                n_heads=self.n_heads,
                n_layers=self.n_layers,
                max_seq_len=self.max_seq_len,
                rope_base=self.rope_base,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def run_dir(self) -> Path:
        path = Path(self.out_dir)
        if not path.is_absolute():
            root = os.environ.get(OUTPUT_ROOT_ENV)
            if root:
                path = Path(root) / path
        return path

    def echo_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(name: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def _field_types() -> dict[str, type]:
    types = {}
    for f in fields(ExperimentConfig):
        t = f.type if isinstance(f.type, type) else {"int": int, "float": float,
                                                     "bool": bool, "str": str}[f.type]
        types[f.name] = t
    return types


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines ('#' starts a comment) into a dict."""
    types = _field_types()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        name, raw = (part.strip() for part in stripped.split("=", 1))
        if name not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
        values[name] = _parse_value(name, raw, types[name])
    return values


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from an optional file plus override pairs (which win)."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values.update(parse_config_text(text, source=str(path)))
    if overrides:
        types = _field_types()
        for name, raw in overrides.items():
            if name not in types:
                raise ConfigError(f"unknown config key {name!r}")
            values[name] = _parse_value(name, str(raw), types[name])
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
