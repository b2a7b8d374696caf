"""Run configuration: one JSON document with data / ldn / sldm / sampler sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from tpg import ConfigError
from tpg.data import SyntheticConfig
from tpg.diffusion import SamplerConfig
from tpg.ldn import LdnConfig

# One flag per ablation row; each touches a single feature or loss path.
ABLATIONS = (
    "no_ldn",
    "no_content",
    "no_structure",
    "no_defect",
    "no_alignment",
    "no_cls",
    "no_std",
)


@dataclass
class SldmConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    p_drop: float = 0.1
    lambda_std: float = 1e-4
    lambda_cls: float = 1e-4
    lambda_perceptual: float = 1e-2
    lambda_mse: float = 1e-1
    labeled_fraction: float = 0.5
    unlabeled_consistency: bool = False
    align_t_max: int = 500
    lr: float = 3e-3
    lr_cosine: bool = False
    steps: int = 1500
    batch_size: int = 16
    grad_clip: float = 1.0
    ema_decay: float = 0.995
    widths: tuple[int, int, int] = (32, 48, 64)
    ctx_dim: int = 64
    time_dim: int = 128
    heads: int = 4
    checkpoint_every: int = 1000
    codec_factor: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    ldn: LdnConfig = field(default_factory=LdnConfig)
    sldm: SldmConfig = field(default_factory=SldmConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    ablate: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flag(s): {', '.join(bad)}")
        self.data.validate()
        s = self.sldm
        if min(s.lambda_std, s.lambda_cls, s.lambda_perceptual, s.lambda_mse) < 0:
            raise ConfigError("alignment weights must be nonnegative")
        if not 0 < s.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if not 1 <= s.align_t_max <= s.T:
            raise ConfigError("align_t_max must lie in [1, T]")
        if not 0 <= s.p_drop < 1:
            raise ConfigError("p_drop must lie in [0, 1)")
        if self.sampler.guidance < 0:
            raise ConfigError("guidance scale must be >= 0")
        if self.data.image_size % s.codec_factor:
            raise ConfigError("codec factor must divide image_size")

    def has(self, flag: str) -> bool:
        return flag in self.ablate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"] = self.data.to_dict()
        d["sldm"]["widths"] = list(self.sldm.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                data=SyntheticConfig(**d.get("data", {})),
                ldn=LdnConfig(**d.get("ldn", {})),
                sldm=SldmConfig(**d.get("sldm", {})),
                sampler=SamplerConfig(**d.get("sampler", {})),
                seed=int(d.get("seed", 0)),
                ablate=list(d.get("ablate", [])),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def stage_hash(self, stage: str) -> str:
        """Hash of the sections a stage's checkpoint depends on."""
        d = self.to_dict()
        keys = {"ldn": ("ldn", "seed"), "sldm": ("ldn", "sldm", "seed", "ablate")}[stage]
        sub = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return d


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    d = RunConfig().to_dict()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for section, values in user.items():
            if isinstance(values, dict) and isinstance(d.get(section), dict):
                d[section].update(values)
            else:
                d[section] = values
    return RunConfig.from_dict(apply_overrides(d, overrides or []))
