"""Losses, Adam, early stopping and the three-stage training schedule.

Stages follow the order PMOS alone (``lambda1 = 0``), then SE with the PMOS
network frozen (``lambda1 = 1``), then both networks jointly
(``0 < lambda1 < 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Utterance
from .dsp import PMOS_CONFIG, SE_CONFIG, istft_length, normalize_features, reconstruct_tensor, stft
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .numerics import Tape, Tensor, backward, log, maximum, no_tape, tanh
from .pmos import PmosModel, pmos_encode, pmos_forward
from .se import SeModel, se_features, se_forward

__all__ = [
    "STAGES",
    "LossConfig",
    "LossBreakdown",
    "compute_losses",
    "combine",
    "sdr_loss",
    "sdr_loss_tensor",
    "clip_sdr",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "EpochRecord",
    "StageResult",
    "Example",
    "prepare_examples",
    "evaluate_loss",
    "run_training_stage",
    "format_history",
]

STAGES = ("pmos-only", "se-only", "joint")
SDR_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.8
    lambda2: float = 0.5
    sdr_theta: float = 20.0
    stage: str = "joint"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}", field="stage")
        if not (0 <= self.lambda1 <= 1 and 0 <= self.lambda2 <= 1):
            raise ConfigError("lambda1 and lambda2 must lie in [0, 1]", field="lambda")
        if self.stage == "pmos-only" and self.lambda1 != 0:
            raise ConfigError("pmos-only stage requires lambda1 = 0", field="lambda1")
        if self.stage == "se-only" and self.lambda1 != 1:
            raise ConfigError("se-only stage requires lambda1 = 1", field="lambda1")
        if self.stage == "joint" and not 0 < self.lambda1 < 1:
            raise ConfigError("joint stage requires 0 < lambda1 < 1", field="lambda1")

    @classmethod
    def for_stage(cls, stage: str, lambda1: float = 0.8, lambda2: float = 0.5, sdr_theta: float = 20.0):
        if stage == "pmos-only":
            lambda1 = 0.0
        elif stage == "se-only":
            lambda1 = 1.0
        return cls(lambda1, lambda2, sdr_theta, stage)


def combine(l_mse: float, l_sa: float, l_mos: float, lambda1: float, lambda2: float) -> float:
    return lambda1 * (lambda2 * l_mse + (1 - lambda2) * l_sa) + (1 - lambda1) * l_mos


@dataclass
class LossBreakdown:
    l_mse: float
    l_sa: float
    l_mos: float
    combined: float
    total: Tensor | None = field(default=None, repr=False)  # differentiable combined


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def compute_losses(est_mag, ref_mag, est_wave, ref_wave, est_mos, ref_mos, cfg: LossConfig) -> LossBreakdown:
    """Spectral MSE, time-domain MSE and squared MOS error, combined.

    A component whose inputs are ``None`` counts as 0; this is only allowed
    when its weight in the combination is zero. Waveforms are trimmed to
    their common length.
    """
    l1, l2 = cfg.lambda1, cfg.lambda2
    zero = Tensor(0.0)
    if est_mag is None:
        if l1 != 0:
            raise ConfigError("spectral estimate missing but lambda1 > 0", field="lambda1")
        mse = sa = zero
    else:
        est_mag, ref_mag = _t(est_mag), _t(ref_mag)
        if est_mag.shape != ref_mag.shape:
            raise ShapeError(f"magnitude shapes {est_mag.shape} and {ref_mag.shape} differ")
        mse = ((est_mag - ref_mag) ** 2).mean()
        if est_wave is None:
            if l2 != 1:
                raise ConfigError("waveform estimate missing but lambda2 < 1", field="lambda2")
            sa = zero
        else:
            est_wave, ref_wave = _t(est_wave), _t(ref_wave)
            if est_wave.ndim != 1 or ref_wave.ndim != 1:
                raise ShapeError("waveforms must be 1-D")
            n = min(len(est_wave), len(ref_wave))
            sa = ((est_wave[0:n] - ref_wave[0:n]) ** 2).mean()
    if est_mos is None:
        if l1 != 1:
            raise ConfigError("MOS estimate missing but lambda1 < 1", field="lambda1")
        mos = zero
    else:
        mos = (_t(est_mos) - _t(ref_mos)) ** 2
        if mos.size != 1:
            raise ShapeError("MOS estimate must be scalar")
        mos = mos.sum()
    total = (mse * l2 + sa * (1 - l2)) * l1 + mos * (1 - l1)
    return LossBreakdown(mse.item(), sa.item(), mos.item(), total.item(), total)


def clip_sdr(a, theta: float = 20.0):
    """Soft clipping ``theta * tanh(a / theta)``."""
    return theta * np.tanh(np.asarray(a) / theta)


def sdr_loss_tensor(ref, est: Tensor, theta: float = 20.0) -> Tensor:
    """Differentiable clipped SDR summed over the rows of a batch."""
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    est = est if est.ndim == 2 else est.reshape(1, -1)
    if ref.shape != est.shape:
        raise ShapeError(f"sdr_loss: reference {ref.shape} and estimate {est.shape} differ")
    if theta <= 0:
        raise ConfigError("sdr clipping parameter must be positive", field="sdr_theta")
    energy = (ref * ref).sum(axis=1)
    if (energy == 0).any():
        raise DataError("sdr_loss: zero-energy reference")
    err = maximum(((Tensor(ref) - est) ** 2).sum(axis=1), SDR_EPS)
    raw = (log(err) * -1.0 + np.log(energy)) * (10.0 / math.log(10.0))
    return (tanh(raw / theta) * theta).sum()


def sdr_loss(ref, est, theta: float = 20.0) -> float:
    with no_tape():
        return sdr_loss_tensor(ref, Tensor(est), theta).item()


# --- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; aborts before touching anything
    if any gradient is non-finite."""
    for name, p in params.items():
        if p.grad is None:
            raise ConfigError(f"parameter {name} has no gradient", field=name)
        if p.grad.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name}", field=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- training loop -------------------------------------------------------


@dataclass
class Example:
    """Per-utterance arrays precomputed once per stage."""

    id: str
    pmos_feats: np.ndarray
    se_feats: np.ndarray
    mix_phase: np.ndarray
    clean_mag: np.ndarray
    clean_wave: np.ndarray
    mos_label: float


def prepare_examples(utts: Sequence[Utterance]) -> list[Example]:
    out = []
    for u in utts:
        mix = stft(u.mixture, SE_CONFIG)
        clean = stft(u.clean, SE_CONFIG)
        pmos_feats, _ = normalize_features(stft(u.mixture, PMOS_CONFIG).magnitude)
        n = istft_length(mix.n_frames, SE_CONFIG)
        out.append(
            Example(
                u.id,
                pmos_feats,
                se_features(mix.magnitude),
                mix.phase,
                clean.magnitude,
                u.clean.samples[:n],
                u.mos_label,
            )
        )
    return out


@dataclass
class TrainConfig:
    stage: str
    loss: LossConfig
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    shuffle: bool = True


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    l_mse: float
    l_sa: float
    l_mos: float
    combined: float
    val_combined: float


@dataclass
class StageResult:
    pmos: PmosModel
    se: SeModel | None
    history: list[EpochRecord]
    best_val: float
    best_epoch: int


def _losses(ex: Example, pmos: PmosModel, se: SeModel | None, cfg: LossConfig) -> LossBreakdown:
    """Forward pass for one utterance under the current tape (if any)."""
    est_mos = est_mag = est_wave = None
    if cfg.stage == "pmos-only":
        est_mos, _ = pmos_forward(pmos, ex.pmos_feats)
    elif cfg.stage == "se-only":
        with no_tape():
            H = pmos_encode(pmos, ex.pmos_feats)
        H = Tensor(H.data)
        est_mag = se_forward(se, ex.se_feats, H)
    else:
        est_mos, H = pmos_forward(pmos, ex.pmos_feats)
        est_mag = se_forward(se, ex.se_feats, H)
    if est_mag is not None and cfg.lambda2 < 1:
        est_wave = reconstruct_tensor(est_mag, ex.mix_phase, SE_CONFIG)
    return compute_losses(
        est_mag,
        ex.clean_mag if est_mag is not None else None,
        est_wave,
        ex.clean_wave,
        est_mos,
        ex.mos_label,
        cfg,
    )


def evaluate_loss(examples: Sequence[Example], pmos: PmosModel, se: SeModel | None, cfg: LossConfig) -> float:
    """Mean combined loss without recording a tape."""
    with no_tape():
        return float(np.mean([_losses(ex, pmos, se, cfg).combined for ex in examples]))


def _trainable(stage: str, pmos: PmosModel, se: SeModel | None) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    if stage in ("pmos-only", "joint"):
        params.update({f"pmos.{k}": v for k, v in pmos.parameters().items()})
    if stage in ("se-only", "joint"):
        params.update({f"se.{k}": v for k, v in se.parameters().items()})
    return params


def run_training_stage(
    pmos: PmosModel,
    se: SeModel | None,
    train: Sequence[Example],
    validation: Sequence[Example],
    cfg: TrainConfig,
    pmos_trained: bool = True,
    log=None,
) -> StageResult:
    """Train one stage with early stopping on the validation combined loss.

    The returned models carry the best-validation parameters; the starting
    point counts as a candidate, so the result is never worse on validation
    than the input models.
    """
    stage = cfg.stage
    if stage != cfg.loss.stage:
        raise ConfigError("TrainConfig.stage and LossConfig.stage disagree", field="stage")
    if stage in ("se-only", "joint"):
        if not pmos_trained:
            raise ConfigError(f"{stage} stage needs a trained PMOS checkpoint", field="pmos_checkpoint")
        if se is None:
            raise ConfigError(f"{stage} stage needs an SE model", field="se_checkpoint")
    if not train or not validation:
        raise DataError("training and validation sets must be non-empty")

    params = _trainable(stage, pmos, se)
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    best_val = evaluate_loss(validation, pmos, se, cfg.loss)
    best_epoch = 0
    best = {k: p.data.copy() for k, p in params.items()}
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train)) if cfg.shuffle else np.arange(len(train))
        sums = np.zeros(4)
        for i in order:
            with Tape() as tape:
                lb = _losses(train[i], pmos, se, cfg.loss)
            backward(tape, lb.total)
            adam_step(params, opt)
            sums += (lb.l_mse, lb.l_sa, lb.l_mos, lb.combined)
        means = sums / len(train)
        val = evaluate_loss(validation, pmos, se, cfg.loss)
        rec = EpochRecord(epoch, stage, *means.tolist(), val)
        history.append(rec)
        if log is not None:
            log(format_record(rec))
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, p in params.items():
        p.data[...] = best[k]
        p.grad = None
    return StageResult(pmos, se, history, best_val, best_epoch)


HISTORY_HEADER = "# epoch\tstage\tl_mse\tl_sa\tl_mos\tcombined\tval_combined"


def format_record(r: EpochRecord) -> str:
    vals = [repr(float(x)) for x in (r.l_mse, r.l_sa, r.l_mos, r.combined, r.val_combined)]
    return "\t".join([str(r.epoch), r.stage, *vals])


def format_history(history: Sequence[EpochRecord]) -> str:
    return "\n".join([HISTORY_HEADER, *map(format_record, history)]) + "\n"


def write_history(path, history: Sequence[EpochRecord]) -> None:
    Path(path).write_text(format_history(history))
