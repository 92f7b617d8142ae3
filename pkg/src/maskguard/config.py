"""Run configuration: a flat ``section.key = value`` text format.

Grammar::

    file     = { line } ;
    line     = [ entry ] [ comment ] newline ;
    entry    = ws key ws "=" ws value ws ;
    key      = name "." name ;
    name     = letter { letter | digit | "_" } ;
    value    = int | float | word | list ;
    list     = int { "," ws int } ;
    comment  = "#" { any char but newline } ;

Blank lines and comments are ignored. Each key may appear once; keys
not listed in the defaults are rejected. Values are typed by the
default they replace.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PathsSection:
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class DataSection:
    n_scenes: int = 2000
    hazard_rate: float = 0.5
    test_fraction: float = 0.2
    n_pairs: int = 200


@dataclass
class ModelSection:
    channels: int = 4
    height: int = 16
    width: int = 16
    hidden: int = 32
    text_dim: int = 32
    n_blocks: int = 2
    n_attn: int = 2
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class TrainSection:
    steps: int = 6000
    batch: int = 16
    lr: float = 3e-3


@dataclass
class DetectionSection:
    lambda_ce: float = 1.0
    lambda_mse: float = 5.0
    alpha: float = 0.3
    layers: tuple[int, ...] = (1,)
    shots: int = 10
    epochs: int = 300
    lr: float = 1e-2
    token_dim: int = 32
    attn_dim: int = 32
    max_t_fraction: float = 0.2


@dataclass
class SuppressionSection:
    mode: str = "region_guided"
    window: float = 0.2


@dataclass
class DPOSection:
    beta: float = 0.1
    lr: float = 2e-3
    epochs: int = 30
    batch: int = 16
    max_t_fraction: float = 0.5


@dataclass
class EvalSection:
    n_safety_prompts: int = 64
    n_ablation_seeds: int = 32
    n_eval_scenes: int = 40
    sweep_timesteps: tuple[int, ...] = (1, *range(5, 101, 5))
    late_fraction: float = 0.2
    early_fraction: float = 0.8


@dataclass
class SeedsSection:
    data: int = 0
    base: int = 0
    detector: int = 0
    dpo: int = 0
    eval: int = 0


_SECTIONS = {
    "paths": PathsSection, "data": DataSection, "model": ModelSection, "train": TrainSection,
    "detection": DetectionSection, "suppression": SuppressionSection, "dpo": DPOSection,
    "eval": EvalSection, "seeds": SeedsSection,
}

_ENTRY = re.compile(r"^([A-Za-z][A-Za-z0-9_]*)\.([A-Za-z][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    suppression: SuppressionSection = field(default_factory=SuppressionSection)
    dpo: DPOSection = field(default_factory=DPOSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    def items(self):
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                yield sec, f.name, getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{s}.{k} = {format_value(v)}\n" for s, k, v in self.items())

    def fingerprint(self, include_paths: bool = False) -> str:
        """Stable hash of the canonical text; output locations are excluded by default."""
        text = "".join(f"{s}.{k} = {format_value(v)}\n" for s, k, v in self.items()
                       if include_paths or s != "paths")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def set(self, key: str, raw: str) -> None:
        sec, _, name = key.partition(".")
        if sec not in _SECTIONS or not name:
            raise ConfigError(f"unknown key {key!r}", key=key)
        obj = getattr(self, sec)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown key {key!r}", key=key)
        setattr(obj, name, parse_value(raw, getattr(obj, name), key))

    def validate(self) -> "RunConfig":
        checks = [
            ("data.n_scenes", self.data.n_scenes >= 1),
            ("data.hazard_rate", 0.0 <= self.data.hazard_rate <= 1.0),
            ("data.test_fraction", 0.0 < self.data.test_fraction < 1.0),
            ("data.n_pairs", self.data.n_pairs >= 1),
            ("model.T", self.model.T >= 1),
            ("model.beta_start", 0.0 < self.model.beta_start <= self.model.beta_end),
            ("model.beta_end", 0.0 < self.model.beta_end < 1.0),
            ("model.n_attn", 1 <= self.model.n_attn <= self.model.n_blocks),
            ("train.steps", self.train.steps >= 1),
            ("train.batch", self.train.batch >= 1),
            ("train.lr", self.train.lr > 0),
            ("detection.alpha", 0.0 <= self.detection.alpha <= 1.0),
            ("detection.lambda_ce", self.detection.lambda_ce >= 0),
            ("detection.lambda_mse", self.detection.lambda_mse >= 0),
            ("detection.layers", len(self.detection.layers) > 0
             and all(0 <= l < self.model.n_attn for l in self.detection.layers)),
            ("detection.shots", self.detection.shots >= 1),
            ("detection.epochs", self.detection.epochs >= 1),
            ("suppression.mode", self.suppression.mode in ("region_guided", "global", "off")),
            ("suppression.window", 0.0 <= self.suppression.window <= 1.0),
            ("dpo.beta", self.dpo.beta > 0),
            ("dpo.epochs", self.dpo.epochs >= 1),
            ("eval.n_safety_prompts", self.eval.n_safety_prompts >= 1),
            ("eval.n_ablation_seeds", self.eval.n_ablation_seeds >= 1),
            ("eval.n_eval_scenes", self.eval.n_eval_scenes >= 1),
            ("eval.sweep_timesteps", all(1 <= t <= self.model.T for t in self.eval.sweep_timesteps)),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key}", key=key)
        return self


def format_value(v) -> str:
    if isinstance(v, bool):
        raise TypeError("booleans are not part of the config grammar")
    if isinstance(v, tuple):
        return ", ".join(str(int(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(raw: str, like, key: str = "?"):
    try:
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(","))
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for {key}", key=key) from None
    if not raw or "#" in raw or any(c.isspace() for c in raw):
        raise ConfigError(f"bad word value {raw!r} for {key}", key=key)
    return raw


def loads(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _ENTRY.match(body)
        if m is None:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'", key=f"line{lineno}")
        key = f"{m.group(1)}.{m.group(2)}"
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", key=key)
        seen.add(key)
        cfg.set(key, m.group(3))
    return cfg.validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.dumps())
