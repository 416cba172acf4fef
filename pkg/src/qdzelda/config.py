"""Experiment configuration files.

A config is an INI-style ``key = value`` file, one section per concern::

    [experiment]
    algorithm = EFME
    level_manifest = builtin:desk3
    scheme = win10
    observation = onehot
    budget = 2000
    seed = 0
    workers = 0

    [env]
    step_limit = 200

    [efme]
    explore_ratio = 0.67

Missing keys take their defaults. ``level_manifest`` is either a path
(relative paths resolve against the config file's directory) or
``builtin:<name>`` for a manifest shipped with the package.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

from .algorithms import CmaConfig, DmeConfig, EfmeConfig, VmeConfig
from .archive import FeatureScheme
from .env import EnvConfig
from .policy import NetworkTopology, ObsMode, channels_for

LEVELS_DIR = Path(__file__).parent / "levels"
ALGORITHMS = ("VME", "CMAME", "DME", "EFME")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    conv_filters: Tuple[int, int, int] = (16, 16, 16)
    conv_kernel: Tuple[int, int, int] = (3, 3, 3)
    conv_stride: Tuple[int, int, int] = (1, 1, 1)
    pool: Tuple[int, int] = (4, 4)

    def topology(self, mode: ObsMode) -> NetworkTopology:
        specs = tuple(zip(self.conv_filters, self.conv_kernel, self.conv_stride))
        return NetworkTopology(input_channels=channels_for(mode), conv_specs=specs,
                               pool=tuple(self.pool))


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "VME"
    level_manifest: str = "builtin:default"
    scheme: FeatureScheme = FeatureScheme.WIN10
    observation: ObsMode = ObsMode.ONE_HOT
    budget: int = 1000
    seed: int = 0
    workers: int = 0  # 0 = sequential in-process evaluation
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    vme: VmeConfig = field(default_factory=VmeConfig)
    cma: CmaConfig = field(default_factory=CmaConfig)
    dme: DmeConfig = field(default_factory=DmeConfig)
    efme: EfmeConfig = field(default_factory=EfmeConfig)
    base_dir: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")

    @property
    def topology(self) -> NetworkTopology:
        return self.policy.topology(self.observation)

    def manifest_path(self) -> Path:
        m = self.level_manifest
        if m.startswith("builtin:"):
            return LEVELS_DIR / f"{m[len('builtin:'):]}.txt"
        p = Path(m)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return dump_config(self)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_SECTIONS = {"env": EnvConfig, "policy": PolicyConfig, "vme": VmeConfig, "cma": CmaConfig,
             "dme": DmeConfig, "efme": EfmeConfig}
_TOP_KEYS = ("algorithm", "level_manifest", "scheme", "observation", "budget", "seed", "workers")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, like, where: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(p) for p in raw.split(","))
        if isinstance(like, (FeatureScheme, ObsMode)):
            return type(like)(raw.lower())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {k: _fmt(getattr(cfg, k)) for k in _TOP_KEYS}
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config(text: str, base_dir: Union[str, Path, None] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    unknown = set(cp.sections()) - {"experiment", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    defaults = ExperimentConfig()
    top = {}
    if cp.has_section("experiment"):
        for key, raw in cp["experiment"].items():
            if key not in _TOP_KEYS:
                raise ConfigError(f"[experiment]: unknown key {key!r}")
            if key == "algorithm":
                top[key] = raw.strip().upper()
            else:
                top[key] = _convert(raw, getattr(defaults, key), f"[experiment] {key}")
    subs = {}
    for name, cls in _SECTIONS.items():
        proto = getattr(defaults, name)
        kwargs = {}
        if cp.has_section(name):
            known = {f.name for f in dataclasses.fields(cls)}
            for key, raw in cp[name].items():
                if key not in known:
                    raise ConfigError(f"[{name}]: unknown key {key!r}")
                kwargs[key] = _convert(raw, getattr(proto, key), f"[{name}] {key}")
        try:
            subs[name] = cls(**kwargs)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"[{name}]: {err}") from None
    try:
        cfg = ExperimentConfig(**top, **subs,
                               base_dir=None if base_dir is None else str(base_dir))
        cfg.topology  # validates the network shape
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text, base_dir=path.resolve().parent)


def validate_files(cfg: ExperimentConfig):
    """Check that the level manifest and every level it lists exist."""
    from .env import read_manifest

    manifest = cfg.manifest_path()
    if not manifest.is_file():
        raise ConfigError(f"level manifest not found: {manifest}")
    paths = read_manifest(manifest)
    if not paths:
        raise ConfigError(f"level manifest lists no levels: {manifest}")
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"level file not found: {p}")
