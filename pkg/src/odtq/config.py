"""INI run configuration with sections [data], [policy], [uq], [calibration], [eval].

Every key maps onto a dataclass field; unknown sections or keys are errors.
The ``seed`` in ``[eval]`` seeds every stage.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .pathpolicy import PolicyConfig
from .synthgen import DataConfig
from .uqmoe import MoeConfig

# derived from [data] rather than set in [uq]
_UQ_DERIVED = ("n_slices", "slice_len", "start_time", "seed")


@dataclass
class CalibConfig:
    alpha: float = 0.1
    delta: float = 0.1
    grid_max: float = 4.0
    grid_step: float = 0.01
    lambda_cap: float = 1e6

    def validate(self):
        if not 0 < self.alpha < 1 or not 0 < self.delta < 1:
            raise ConfigError("alpha and delta must lie in (0, 1)")
        if self.grid_max <= 0 or self.grid_step <= 0:
            raise ConfigError("grid_max and grid_step must be positive")
        return self


@dataclass
class EvalConfig:
    seed: int = 0
    split: str = "test"
    threads: int = 1

    def validate(self):
        if self.split not in ("train", "val", "calib", "test"):
            raise ConfigError(f"unknown evaluation split {self.split!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    uq: MoeConfig = field(default_factory=MoeConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        self.eval.seed = int(seed)
        self.data.seed = self.policy.seed = self.uq.seed = int(seed)
        return self

    def finalize(self) -> "RunConfig":
        self.with_seed(self.eval.seed)
        d = self.data
        self.uq.n_slices, self.uq.slice_len, self.uq.start_time = d.n_slices, d.slice_len, d.start_time
        for part in (self.data, self.policy, self.uq, self.calibration, self.eval):
            part.validate()
        return self

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {"data": (DataConfig, ("seed",)), "policy": (PolicyConfig, ("seed",)),
             "uq": (MoeConfig, _UQ_DERIVED), "calibration": (CalibConfig, ()),
             "eval": (EvalConfig, ())}


def _coerce(raw: str, default, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None:
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls, forbidden = _SECTIONS[section]
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(cls)} - set(forbidden)
        for key, raw in cp.items(section):
            if key not in names:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(raw, getattr(target, key), f"{source} [{section}] {key}"))
    return cfg.finalize()


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    cfg = parse_config(text, str(path))
    if seed is not None:
        cfg.with_seed(seed)
    return cfg
