"""Sectioned key-value run configuration with strict keys and a full resolved echo."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import PRESETS, ModelConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    """Malformed config file: unknown section or key, or a value of the wrong type."""


@dataclass(frozen=True)
class RunSection:
    preset: str = "toy"
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    num_labeled: int = 500
    num_unlabeled: int = 5000
    num_valid: int = 100
    chars: str = "abcdef"
    words_per_utt: tuple[int, int] = (2, 4)
    word_len: tuple[int, int] = (2, 4)
    lexicon_size: int = 24
    successors: int = 3
    noise_sigma: float = 0.5
    token_ms: int = 24
    sample_rate: int = 1000
    base_freq: float = 150.0
    freq_step: float = 50.0
    language_seed: int = 1234
    min_duration: float = 0.2
    max_duration: float = 3.3

    def __post_init__(self):
        if self.min_duration > self.max_duration:
            raise ValueError(f"min_duration {self.min_duration} exceeds max_duration {self.max_duration}")


@dataclass(frozen=True)
class DecodeSection:
    beam: int = 8
    lm_order: int = 4
    lm_smoothing: str = "addk"
    lm_k: float = 0.1
    lm_discount: float = 0.75
    alpha: float = 0.0
    beta: float = 0.0
    alpha_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    beta_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class PathsSection:
    labeled: str = ""
    unlabeled: str = ""
    valid: str = ""
    out: str = "runs/default"
    lm: str = ""


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataSection = field(default_factory=DataSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    paths: PathsSection = field(default_factory=PathsSection)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _parse(raw: str, type_str: str, where: str):
    t = type_str.replace(" ", "")
    optional = t.endswith("|None")
    if optional:
        t = t[: -len("|None")]
        if raw.strip().lower() in ("none", ""):
            return None
    try:
        if t == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "str":
            return raw.strip()
        if t.startswith("tuple["):
            elem = float if "float" in t else int
            return tuple(elem(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type_str}") from None
    raise ConfigError(f"{where}: unsupported field type {type_str}")


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section_values(parser: configparser.ConfigParser, name: str, cls) -> dict:
    if not parser.has_section(name):
        return {}
    known = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _parse(raw, str(known[key]), f"[{name}] {key}")
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for s in parser.sections():
        if s not in SECTIONS:
            raise ConfigError(f"unknown section [{s}]")
    run = RunSection(**_section_values(parser, "run", RunSection))
    if run.preset not in PRESETS:
        raise ConfigError(f"[run] preset must be one of {sorted(PRESETS)}, got {run.preset!r}")
    try:
        model = PRESETS[run.preset](**_section_values(parser, "model", ModelConfig))
        tvals = _section_values(parser, "trainer", TrainerConfig)
        tvals.setdefault("seed", run.seed)
        trainer = TrainerConfig(**tvals)
        data = DataSection(**_section_values(parser, "data", DataSection))
        decode = DecodeSection(**_section_values(parser, "decode", DecodeSection))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    paths = PathsSection(**_section_values(parser, "paths", PathsSection))
    return RunConfig(run, model, trainer, data, decode, paths)


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults when ``path`` is None; FileNotFoundError when it does not exist."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text())


def to_text(cfg: RunConfig) -> str:
    """Every resolved field, in declaration order; parse_config(to_text(c)) == c."""
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for k, v in asdict(section).items():
            lines.append(f"{k} = {_format(v)}")
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: RunConfig, seed: int | None = None, preset: str | None = None) -> RunConfig:
    """Apply command-line overrides; a new preset replaces the model section wholesale."""
    if preset is not None and preset != cfg.run.preset:
        cfg = replace(cfg, run=replace(cfg.run, preset=preset), model=PRESETS[preset]())
    if seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=seed), trainer=replace(cfg.trainer, seed=seed))
    return cfg


def echo(cfg: RunConfig, run_dir: str | Path) -> Path:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    out = d / "config.ini"
    out.write_text(to_text(cfg))
    return out
