"""Run configuration: defaults, presets, JSON files and flag overrides.

Precedence is flag > file > preset > default. The resolved config is written
to the output directory before any work starts.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autodiff.optim import LrSchedule
from .core import BASELINE_KINDS, TrainSettings, ZoomConfig
from .errors import ConfigError
from .nets import PolicyNetConfig, SegNetConfig, policy_config_from_dict, seg_config_from_dict

DATA_ROOT_ENV = "RAZN_DATA_ROOT"
RUN_KINDS = ("razn",) + BASELINE_KINDS


@dataclass
class RunConfig:
    data: str | None = None
    out: str = "runs/razn"
    baseline: str = "razn"
    seed: int = 0
    steps: int = 5000
    batch_size: int = 8
    level: int = 0
    patch_size: int = 64
    stratify: float = 0.5
    test_fraction: float = 0.25
    split_seed: int = 0
    lr: float = 0.002
    lr_factor: float = 0.1
    lr_period: int = 5000
    checkpoint_every: int = 1000
    log_every: int = 50
    max_zoom: int = 1
    rate: int = 2
    alpha: float = 0.8
    reward_sign: str = "as-written"
    eps: float = 1e-8
    decision: str = "threshold"
    baseline_source: str = "pyramid"
    net_size: int | None = None
    seg_net: dict = field(default_factory=lambda: SegNetConfig().to_dict())
    policy_net: dict = field(default_factory=lambda: PolicyNetConfig().to_dict())

    def __post_init__(self):
        if self.baseline not in RUN_KINDS:
            raise ConfigError(f"baseline must be one of {RUN_KINDS}, got {self.baseline!r}")
        for name in ("steps", "batch_size", "patch_size", "lr_period", "checkpoint_every", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.stratify <= 1.0:
            raise ConfigError("stratify must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        # building the typed views validates their own invariants
        self.zoom_config()
        self.schedule()
        cfg = self.seg_config()
        self.policy_config()
        if self.patch_size % cfg.output_stride:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by {cfg.output_stride}")

    def zoom_config(self) -> ZoomConfig:
        return ZoomConfig(self.max_zoom, self.rate, self.alpha, self.reward_sign, self.eps, self.decision)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_factor, self.lr_period)

    def settings(self) -> TrainSettings:
        return TrainSettings(
            self.level, self.patch_size, self.batch_size, self.stratify, self.test_fraction, self.split_seed, self.seed
        )

    def seg_config(self) -> SegNetConfig:
        return seg_config_from_dict(self.seg_net)

    def policy_config(self) -> PolicyNetConfig:
        return policy_config_from_dict(self.policy_net)

    def data_root(self) -> Path:
        return data_root(self.data)

    def to_dict(self) -> dict:
        return asdict(self)


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset given (pass --data or set {DATA_ROOT_ENV})")
    return Path(root)


PRESETS: dict[str, dict] = {
    "desk": {},
    "full": {
        "patch_size": 256,
        "steps": 200000,
        "lr": 0.01,
        "lr_period": 50000,
        "checkpoint_every": 10000,
        "seg_net": SegNetConfig.full_scale().to_dict(),
        "policy_net": PolicyNetConfig.full_scale().to_dict(),
    },
}


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def read_json(path) -> tuple[dict, str]:
    """Parse a JSON object; syntax errors become ConfigError with a line anchor."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}:1: expected a JSON object")
    return obj, text


def anchored(path, text: str, exc: Exception, keys) -> ConfigError:
    """Attach ``file:line`` of the first offending key mentioned in the message."""
    msg = str(exc)
    hits = []
    for key in keys:
        m = re.search(r"\b" + re.escape(key) + r"\b", msg)
        if m:
            hits.append((m.start(), key))
    for _, key in sorted(hits):
        line = _key_line(text, key)
        if line is not None:
            return ConfigError(f"{path}:{line}: {msg}")
    return ConfigError(f"{path}:1: {msg}")


def resolve(path=None, preset: str = "desk", overrides: dict | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (expected one of {sorted(PRESETS)})")
    values = dict(PRESETS[preset])
    text = ""
    if path is not None:
        obj, text = read_json(path)
        known = {f.name for f in fields(RunConfig)} | {"preset"}
        for key in obj:
            if key not in known:
                raise ConfigError(f"{path}:{_key_line(text, key) or 1}: unknown config key {key!r}")
        if "preset" in obj:
            if obj["preset"] not in PRESETS:
                raise ConfigError(f"{path}:{_key_line(text, 'preset')}: unknown preset {obj['preset']!r}")
            values = dict(PRESETS[obj["preset"]])
        values.update({k: v for k, v in obj.items() if k != "preset"})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except (ConfigError, TypeError, ValueError) as exc:
        if path is None:
            raise ConfigError(str(exc)) from exc
        keys = [k for k in values if k not in (overrides or {})]
        keys += sorted({k for v in values.values() if isinstance(v, dict) for k in v})
        raise anchored(path, text, exc, keys) from exc


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
