"""Run configuration: model profiles and the key=value config file.

Keys
----
profile, seed, workers, out, manifest, pmos_checkpoint, se_checkpoint,
qsm_file, lambda1, lambda2, sdr_theta, mu, beam_width, pmos_lr, se_lr,
joint_lr, pmos_epochs, se_epochs, joint_epochs, patience, corpus_count,
corpus_duration, corpus_peak, snr_low, snr_high, qsm_range, qsm_step.

Blank lines and lines starting with ``#`` are ignored. Command-line flags
override file values, which override the profile defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import CorpusSpec
from .errors import ConfigError
from .pmos import PmosConfig
from .qsm import FusionConfig, Quantizer
from .se import SeConfig
from .training import LossConfig

__all__ = ["PROFILES", "Profile", "RunConfig", "parse_config_text", "load_run_config"]


@dataclass(frozen=True)
class Profile:
    name: str
    pmos: PmosConfig
    se: SeConfig
    qsm_range: float
    qsm_step: float


PROFILES = {
    "paper": Profile(
        "paper",
        PmosConfig(front_dim=256, hidden_dims=(128, 64, 32), reduction=2, fc_dim=32),
        SeConfig(
            pmos_embed_dim=64,
            encoder_hidden=200,
            encoder_layers=2,
            decoder_linear=400,
            decoder_hidden=200,
            decoder_layers=2,
        ),
        qsm_range=100.0,
        qsm_step=0.0625,
    ),
    "desk": Profile(
        "desk",
        PmosConfig(front_dim=32, hidden_dims=(16, 16, 8), reduction=2, fc_dim=8),
        SeConfig(
            pmos_embed_dim=16,
            encoder_hidden=24,
            encoder_layers=2,
            decoder_linear=48,
            decoder_hidden=24,
            decoder_layers=2,
        ),
        qsm_range=100.0,
        qsm_step=6.25,
    ),
}

# profile-dependent defaults for keys left unset
_PROFILE_DEFAULTS = {
    "paper": dict(mu=0.01, pmos_lr=1e-3, se_lr=1e-3, joint_lr=1e-3, pmos_epochs=100, se_epochs=100, joint_epochs=100),
    "desk": dict(mu=0.0, pmos_lr=1e-2, se_lr=1e-3, joint_lr=1e-3, pmos_epochs=40, se_epochs=150, joint_epochs=20),
}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    workers: int = 1
    out: str = "run"
    manifest: str | None = None
    pmos_checkpoint: str | None = None
    se_checkpoint: str | None = None
    qsm_file: str | None = None
    lambda1: float = 0.8
    lambda2: float = 0.5
    sdr_theta: float = 20.0
    mu: float | None = None
    beam_width: int = 8
    pmos_lr: float | None = None
    se_lr: float | None = None
    joint_lr: float | None = None
    pmos_epochs: int | None = None
    se_epochs: int | None = None
    joint_epochs: int | None = None
    patience: int = 5
    corpus_count: int = 10
    corpus_duration: float = 1.0
    corpus_peak: float = 0.05
    snr_low: float = -5.0
    snr_high: float = 10.0
    qsm_range: float | None = None
    qsm_step: float | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}", field="profile")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1", field="patience")
        if self.mu is not None and self.mu < 0:
            raise ConfigError("mu must be >= 0", field="mu")
        for name in ("lambda1", "lambda2"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]", field=name)
        if self.corpus_count < 1 or self.corpus_duration <= 0:
            raise ConfigError("corpus_count and corpus_duration must be positive", field="corpus_count")

    def resolved(self) -> "RunConfig":
        """Fill every profile-dependent ``None`` with the profile default."""
        prof = PROFILES[self.profile]
        updates = {k: v for k, v in _PROFILE_DEFAULTS[self.profile].items() if getattr(self, k) is None}
        if self.qsm_range is None:
            updates["qsm_range"] = prof.qsm_range
        if self.qsm_step is None:
            updates["qsm_step"] = prof.qsm_step
        return replace(self, **updates)

    @property
    def model_profile(self) -> Profile:
        return PROFILES[self.profile]

    def quantizer(self) -> Quantizer:
        r = self.resolved()
        return Quantizer(r.qsm_range, r.qsm_step)

    def fusion(self) -> FusionConfig:
        return FusionConfig(mu=self.resolved().mu, beam_width=self.beam_width)

    def loss(self, stage: str) -> LossConfig:
        return LossConfig.for_stage(stage, self.lambda1, self.lambda2, self.sdr_theta)

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(
            count=self.corpus_count,
            duration=self.corpus_duration,
            snr_range=(self.snr_low, self.snr_high),
            seed=self.seed,
            peak=self.corpus_peak,
        )

    def path(self, name: str) -> Path:
        """Default artifact location inside ``out`` unless a key overrides it."""
        explicit = {
            "pmos.ckpt": self.pmos_checkpoint,
            "se.ckpt": self.se_checkpoint,
            "model.qsm": self.qsm_file,
            "manifest.tsv": self.manifest,
        }.get(name)
        if explicit is not None:
            return Path(explicit)
        if name == "manifest.tsv":
            return Path(self.out) / "corpus" / name
        return Path(self.out) / name

    def describe(self) -> str:
        r = self.resolved()
        return "\n".join(f"{f.name}={_format(getattr(r, f.name))}" for f in fields(r))


def _format(v) -> str:
    return "-" if v is None else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if raw in ("", "-") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}", field=key) from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value", field="config")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", field=key)
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found", field="config")
        values.update(parse_config_text(p.read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
