"""Command implementations shared by the CLI and the test-suite.

Artifacts live under ``RunConfig.out``::

    corpus/manifest.tsv, corpus/wav/*.wav   synth-data
    pmos.ckpt, history_pmos.tsv             train-pmos
    se.ckpt, history_se.tsv                 train-se
    joint_pmos.ckpt, joint_se.ckpt, ...     train-joint
    model.qsm                               build-qsm
    enhanced/<id>.wav                       enhance
    report.tsv                              evaluate

The stage-1 PMOS checkpoint is the MOS-LQO judge in ``evaluate`` so that
joint fine-tuning cannot grade its own output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import RunConfig
from .corpus import Utterance, load_corpus, save_corpus, synth_corpus, write_wav
from .dsp import SE_CONFIG, stft
from .errors import ConfigError, DataError
from .metrics import MetricReport, build_report, write_report
from .pmos import PmosModel, load_pmos, save_pmos
from .qsm import TransitionModel, fit_transitions, load_qsm, quantize_spectrogram, save_qsm
from .se import EnhancedUtterance, SeModel, enhance, load_se, save_se
from .training import StageResult, TrainConfig, prepare_examples, run_training_stage, write_history

__all__ = [
    "SPLIT_CHOICES",
    "synth_data",
    "load_split",
    "train_pmos",
    "train_se",
    "train_joint",
    "build_qsm",
    "enhance_split",
    "evaluate",
]

SPLIT_CHOICES = ("train", "validation", "test", "all")


def _require(path: Path, field: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing artifact {path}", field=field)
    return path


def synth_data(cfg: RunConfig) -> Path:
    return save_corpus(synth_corpus(cfg.corpus_spec()), cfg.path("manifest.tsv").parent)


def load_split(cfg: RunConfig, split: str) -> list[Utterance]:
    if split not in SPLIT_CHOICES:
        raise ConfigError(f"unknown split {split!r}", field="split")
    utts = load_corpus(_require(cfg.path("manifest.tsv"), "manifest"))
    chosen = utts if split == "all" else [u for u in utts if u.split == split]
    if not chosen:
        raise DataError(f"corpus has no {split!r} utterances")
    return chosen


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _train_and_validation(cfg: RunConfig):
    train = prepare_examples(load_split(cfg, "train"))
    try:
        val = prepare_examples(load_split(cfg, "validation"))
    except DataError:
        val = train
    return train, val


def _stage(cfg: RunConfig, stage: str, pmos, se, lr: float, epochs: int, history: str, log) -> StageResult:
    train, val = _train_and_validation(cfg)
    tc = TrainConfig(stage, cfg.loss(stage), lr=lr, max_epochs=epochs, patience=cfg.patience, seed=cfg.seed)
    result = run_training_stage(pmos, se, train, val, tc, log=log)
    write_history(_ensure_parent(Path(cfg.out) / history), result.history)
    return result


def train_pmos(cfg: RunConfig, log=None) -> StageResult:
    r = cfg.resolved()
    pmos = PmosModel.init(r.model_profile.pmos, seed=r.seed)
    result = _stage(r, "pmos-only", pmos, None, r.pmos_lr, r.pmos_epochs, "history_pmos.tsv", log)
    save_pmos(result.pmos, _ensure_parent(r.path("pmos.ckpt")))
    return result


def train_se(cfg: RunConfig, log=None) -> StageResult:
    r = cfg.resolved()
    pmos = load_pmos(_require(r.path("pmos.ckpt"), "pmos_checkpoint"))
    se = SeModel.init(r.model_profile.se, seed=r.seed + 1)
    result = _stage(r, "se-only", pmos, se, r.se_lr, r.se_epochs, "history_se.tsv", log)
    save_se(result.se, _ensure_parent(r.path("se.ckpt")))
    return result


def train_joint(cfg: RunConfig, log=None) -> StageResult:
    r = cfg.resolved()
    pmos = load_pmos(_require(r.path("pmos.ckpt"), "pmos_checkpoint"))
    se = load_se(_require(r.path("se.ckpt"), "se_checkpoint"))
    result = _stage(r, "joint", pmos, se, r.joint_lr, r.joint_epochs, "history_joint.tsv", log)
    save_pmos(result.pmos, Path(r.out) / "joint_pmos.ckpt")
    save_se(result.se, Path(r.out) / "joint_se.ckpt")
    return result


def build_qsm(cfg: RunConfig) -> TransitionModel:
    """Fit the transition model on clean training magnitudes."""
    r = cfg.resolved()
    q = r.quantizer()
    corpus = [quantize_spectrogram(q, stft(u.clean, SE_CONFIG).magnitude) for u in load_split(r, "train")]
    model = fit_transitions(corpus, q, workers=r.workers)
    save_qsm(model, _ensure_parent(r.path("model.qsm")))
    return model


def _enhancer(cfg: RunConfig) -> tuple[PmosModel, SeModel, TransitionModel | None]:
    joint_pmos, joint_se = Path(cfg.out) / "joint_pmos.ckpt", Path(cfg.out) / "joint_se.ckpt"
    if cfg.pmos_checkpoint is None and cfg.se_checkpoint is None and joint_pmos.is_file() and joint_se.is_file():
        pmos, se = load_pmos(joint_pmos), load_se(joint_se)
    else:
        pmos = load_pmos(_require(cfg.path("pmos.ckpt"), "pmos_checkpoint"))
        se = load_se(_require(cfg.path("se.ckpt"), "se_checkpoint"))
    qsm = None
    if cfg.fusion().mu > 0:
        qsm_path = cfg.path("model.qsm")
        if not qsm_path.is_file():
            raise ConfigError(f"mu > 0 needs a trained QSM; {qsm_path} not found", field="qsm_file")
        qsm = load_qsm(qsm_path)
    elif cfg.qsm_file is not None:
        qsm = load_qsm(_require(cfg.path("model.qsm"), "qsm_file"))
    return pmos, se, qsm


def _enhance_all(cfg: RunConfig, split: str) -> list[tuple[Utterance, EnhancedUtterance]]:
    pmos, se, qsm = _enhancer(cfg)
    utts = load_split(cfg, split)

    def run(u: Utterance) -> EnhancedUtterance:
        return enhance(pmos, se, u.mixture, qsm, cfg.fusion())

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, utts))
    else:
        results = [run(u) for u in utts]
    return list(zip(utts, results))


def enhance_split(cfg: RunConfig, split: str = "test") -> list[Path]:
    out_dir = Path(cfg.out) / "enhanced"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for u, e in _enhance_all(cfg, split):
        p = out_dir / f"{u.id}.wav"
        write_wav(p, e.waveform)
        paths.append(p)
    return paths


def evaluate(cfg: RunConfig, split: str = "test") -> MetricReport:
    judge = load_pmos(_require(cfg.path("pmos.ckpt"), "pmos_checkpoint"))
    pairs = _enhance_all(cfg, split)
    report = build_report([(u.id, u.clean, e.waveform) for u, e in pairs], judge, workers=cfg.workers)
    write_report(_ensure_parent(Path(cfg.out) / "report.tsv"), report)
    return report
