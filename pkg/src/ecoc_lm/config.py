"""Run configuration: a flat ``key=value`` file whose keys can also be set by flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .network import HEADS
from .sampling import COMPATIBLE, STRATEGIES, TEMP_MAX, TEMP_MIN

OUTPUT_ROOT_ENV = "ECOC_OUTPUT_ROOT"
ORDERINGS = ("embedding", "random", "unigram", "identity")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # corpora; empty means the bundled synthetic corpus
    train: str = ""
    valid: str = ""
    test: str = ""
    min_count: int = 1
    max_vocab: int = 0
    # decoder and codebook
    head: str = "ecoc"
    n_bits: int = 0
    ordering: str = "embedding"
    mapping_mode: str = "binary"
    query_token: str = ""
    embeddings: str = ""
    embedding_fallback: str = "ppmi"
    ppmi_window: int = 2
    ppmi_dim: int = 64
    # network
    hidden: int = 400
    layers: int = 2
    dropout: float = 0.2
    init_scale: float = 0.1
    bptt: int = 35
    batch_size: int = 20
    eval_batch_size: int = 10
    # optimizer
    optimizer: str = "sgd"
    lr: float = 20.0
    clip: float = 0.25
    lr_decay: float = 4.0
    # exposure-bias strategy
    strategy: str = "teacher_forcing"
    tau_max: float = 0.25
    delta: float = 0.0
    k: int = 5
    temp_start: float = TEMP_MIN
    temp_end: float = TEMP_MAX
    per_bit_profile: str = "uniform"
    # run control
    epochs: int = 40
    patience: int = 5
    seed: int = 0
    output_dir: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, values: dict[str, str | int | float]) -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kw[key] = types[key](raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {types[key].__name__}") from None
        return cls(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in self.keys())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.head in HEADS, f"head must be one of {HEADS}")
        need(self.ordering in ORDERINGS, f"ordering must be one of {ORDERINGS}")
        need(self.mapping_mode in ("binary", "gray"), "mapping_mode must be binary or gray")
        need(self.embedding_fallback in ("ppmi", "none"), "embedding_fallback must be ppmi or none")
        need(self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}")
        need(self.head in COMPATIBLE[self.strategy],
             f"strategy {self.strategy} does not apply to a {self.head} head")
        need(self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam")
        need(self.per_bit_profile in ("uniform", "significance_ramp"),
             "per_bit_profile must be uniform or significance_ramp")
        need(self.n_bits >= 0, "n_bits must be >= 0 (0 picks 4*ceil(log2 V))")
        for key in ("hidden", "layers", "bptt", "batch_size", "eval_batch_size", "epochs",
                    "k", "ppmi_window", "ppmi_dim", "min_count"):
            need(getattr(self, key) >= 1, f"{key} must be >= 1")
        need(self.max_vocab >= 0, "max_vocab must be >= 0")
        need(self.patience >= 0, "patience must be >= 0")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        need(0.0 <= self.tau_max <= 1.0, "tau_max must lie in [0, 1]")
        need(self.delta >= 0.0, "delta must be >= 0 (0 picks epochs/10)")
        need(self.lr > 0 and self.clip >= 0 and self.lr_decay >= 1.0,
             "need lr > 0, clip >= 0 and lr_decay >= 1")
        need(self.init_scale > 0, "init_scale must be positive")
        for key in ("temp_start", "temp_end"):
            need(TEMP_MIN <= getattr(self, key) <= TEMP_MAX,
                 f"{key} must lie in [{TEMP_MIN}, {TEMP_MAX}]")
        for key in ("train", "valid", "test", "embeddings"):
            path = getattr(self, key)
            need(not path or Path(path).is_file(), f"{key}: no such file {path!r}")
        return self

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        model = f"ecoc-{self.ordering}" if self.head == "ecoc" else self.head
        return root / f"{model}-{self.strategy}-s{self.seed}"


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return RunConfig.from_dict(values)
