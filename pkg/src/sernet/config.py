"""Run configuration: one INI file with ``[run]``, ``[model]``, ``[optim]``, ``[data]`` and ``[ablate]`` sections.

Values are parsed according to the type of each field's default, so a file
written by :func:`dump_config` parses back to an equal :class:`RunConfig`.
Tuples are comma separated; an empty value is the empty tuple.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .seeding import derive_seed
from .training import DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_L2, DEFAULT_LR, DEFAULT_MILESTONES, DEFAULT_MOMENTUM

U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH
    momentum: float = DEFAULT_MOMENTUM
    l2: float = DEFAULT_L2
    epochs: int = DEFAULT_EPOCHS
    milestones: tuple[float, ...] = DEFAULT_MILESTONES
    gamma: float = 0.1
    class_weighting: str = "inverse"
    hflip: bool = False


@dataclass(frozen=True)
class DataConfig:
    # a manifest wins; without one, scenes are synthesized in memory
    manifest: str = ""
    palette: str = ""
    synth_train: int = 8
    synth_val: int = 0


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def model_config(self) -> ModelConfig:
        """The model section with its init seed derived from the run seed."""
        return dataclasses.replace(self.model, seed=derive_seed(self.seed, "model"))

    def sub_seed(self, tag: str) -> int:
        return derive_seed(self.seed, tag)

    def validate(self) -> None:
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.model.validate()
        o = self.optim
        if o.lr <= 0 or o.batch_size < 1 or o.epochs < 0 or not 0 <= o.momentum < 1 or o.l2 < 0:
            raise ConfigError(f"invalid optimizer settings: {o}")
        if any(not 0 < m < 1 for m in o.milestones):
            raise ConfigError(f"milestones are epoch fractions in (0,1), got {o.milestones}")
        if o.class_weighting not in ("inverse", "median", "uniform"):
            raise ConfigError(f"class_weighting must be inverse, median or uniform, got {o.class_weighting!r}")
        if self.data.synth_train < 0 or self.data.synth_val < 0:
            raise ConfigError("synthetic set sizes must be non-negative")
        if not self.ablate.seeds:
            raise ConfigError("[ablate] seeds must not be empty")


# the model's own seed is derived, never configured
_SKIP = {"model": {"seed"}}
_SECTIONS = ("model", "optim", "data", "ablate")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text, 0)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = type(default[0]) if default else float
            return tuple(_parse(p, kind(0), where) for p in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from exc


def _section_fields(name: str, obj):
    return [f for f in dataclasses.fields(obj) if f.name not in _SKIP.get(name, ())]


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": str(cfg.seed), "out": cfg.out}
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(sub, f.name)) for f in _section_fields(name, sub)}
    lines = []
    for sec in cp.sections():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "text"}`` overrides (``run.seed``, ``optim.lr``, ...)."""
    run_kw = {}
    sec_kw: dict[str, dict] = {}
    for dotted, text in overrides.items():
        sec, _, key = dotted.partition(".")
        if sec == "run":
            if key not in ("seed", "out"):
                raise ConfigError(f"unknown key [run] {key}")
            run_kw[key] = _parse(text, getattr(cfg, key), dotted)
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        sub = getattr(cfg, sec)
        names = {f.name for f in _section_fields(sec, sub)}
        if key not in names:
            raise ConfigError(f"unknown key [{sec}] {key}; expected one of {sorted(names)}")
        sec_kw.setdefault(sec, {})[key] = _parse(text, getattr(sub, key), dotted)
    for sec, kw in sec_kw.items():
        run_kw[sec] = dataclasses.replace(getattr(cfg, sec), **kw)
    return dataclasses.replace(cfg, **run_kw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(cp.sections()) - {"run", *_SECTIONS}
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
    overrides = {f"{sec}.{k}": v for sec in cp.sections() for k, v in cp[sec].items()}
    cfg = apply_overrides(RunConfig(), overrides)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), str(p))
