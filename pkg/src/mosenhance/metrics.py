"""Objective metrics for enhanced speech and for MOS regression.

SI-SDR is capped at ``+-SI_SDR_CAP`` dB so a perfect estimate yields a finite
number. Correlations that are undefined (a constant input) are reported as
``None`` rather than NaN.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dsp import SE_CONFIG, Waveform, stft
from .errors import DataError, LengthError, ShapeError
from .pmos import MosScore, PmosModel, pmos_predict

__all__ = [
    "SI_SDR_CAP",
    "si_sdr",
    "spectral_mse",
    "mos_lqo",
    "RegressionMetrics",
    "regression_metrics",
    "UtteranceMetrics",
    "MetricReport",
    "evaluate_utterance",
    "build_report",
    "format_report",
    "write_report",
]

SI_SDR_CAP = 100.0


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, clipped to ``[-100, 100]``.

    Parameters
    ----------
    ref, est : Waveform or array_like
        Equal-length reference and estimate.

    Raises
    ------
    LengthError
        If the lengths differ.
    DataError
        If the reference has zero energy.
    """
    s, e = _samples(ref), _samples(est)
    if s.shape != e.shape or s.ndim != 1:
        raise LengthError(f"si_sdr: reference {s.shape} and estimate {e.shape} differ")
    energy = float(np.dot(s, s))
    if energy == 0.0:
        raise DataError("si_sdr: zero-energy reference")
    target = (float(np.dot(e, s)) / energy) * s
    resid = e - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den == 0.0:
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * math.log10(num / den), -SI_SDR_CAP, SI_SDR_CAP))


def spectral_mse(ref_mag: np.ndarray, est_mag: np.ndarray) -> float:
    if ref_mag.shape != est_mag.shape:
        raise ShapeError(f"spectral_mse: shapes {ref_mag.shape} and {est_mag.shape} differ")
    return float(np.mean((est_mag - ref_mag) ** 2))


def mos_lqo(pmos: PmosModel, w: Waveform) -> MosScore:
    """Predicted quality of ``w`` by the PMOS model, on the 0..10 scale."""
    return pmos_predict(pmos, w)


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    rmse: float
    pcc: float | None  # None when either input is constant
    srcc: float | None


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    da, db = a - a.mean(), b - b.mean()
    na, nb = float(np.dot(da, da)), float(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / math.sqrt(na * nb), -1.0, 1.0))


def regression_metrics(pred: Sequence[float], truth: Sequence[float], epsilon: float = 0.0) -> RegressionMetrics:
    """MAE, RMSE, Pearson and Spearman correlation of predictions.

    Parameters
    ----------
    pred, truth : sequence of float
        Equal, non-empty lengths.
    epsilon : float
        Half-width of the insensitive band for RMSE; errors are shrunk by
        ``epsilon`` toward zero before squaring. ``0`` gives plain RMSE.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise LengthError(f"regression_metrics: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DataError("regression_metrics needs at least one pair")
    if epsilon < 0:
        raise DataError("epsilon must be non-negative")
    err = np.abs(p - t)
    band = np.maximum(err - epsilon, 0.0)
    return RegressionMetrics(
        mae=float(err.mean()),
        rmse=float(math.sqrt(np.mean(band * band))),
        pcc=_pearson(p, t),
        srcc=_pearson(rankdata(p), rankdata(t)),
    )


# --- per-utterance report ------------------------------------------------


@dataclass(frozen=True)
class UtteranceMetrics:
    id: str
    si_sdr_db: float
    spectral_mse: float
    mos_lqo: float


@dataclass
class MetricReport:
    rows: list[UtteranceMetrics]

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def mean(self, name: str) -> float:
        return float(self._column(name).mean())

    def std(self, name: str) -> float:
        return float(self._column(name).std())


COLUMNS = ("si_sdr_db", "spectral_mse", "mos_lqo")


def evaluate_utterance(uid: str, clean: Waveform, enhanced: Waveform, pmos: PmosModel) -> UtteranceMetrics:
    """Compare an enhanced waveform with its clean reference (trimmed to the shorter)."""
    n = min(len(clean), len(enhanced))
    ref = Waveform(clean.samples[:n], clean.sample_rate)
    est = Waveform(enhanced.samples[:n], enhanced.sample_rate)
    mse = spectral_mse(stft(ref, SE_CONFIG).magnitude, stft(est, SE_CONFIG).magnitude)
    return UtteranceMetrics(uid, si_sdr(ref, est), mse, mos_lqo(pmos, est).value)


def build_report(items, pmos: PmosModel, workers: int = 1) -> MetricReport:
    """``items`` are ``(id, clean, enhanced)`` triples; row order follows input order."""
    items = list(items)
    if not items:
        raise DataError("empty evaluation set")

    def run(item):
        return evaluate_utterance(item[0], item[1], item[2], pmos)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, items))
    else:
        rows = [run(it) for it in items]
    return MetricReport(rows)


def format_report(report: MetricReport) -> str:
    lines = ["# id\t" + "\t".join(COLUMNS)]
    for r in report.rows:
        lines.append("\t".join([r.id, *(repr(float(getattr(r, c))) for c in COLUMNS)]))
    for label, fn in (("mean", report.mean), ("std", report.std)):
        lines.append("\t".join([f"#{label}", *(repr(fn(c)) for c in COLUMNS)]))
    return "\n".join(lines) + "\n"


def write_report(path, report: MetricReport) -> None:
    Path(path).write_text(format_report(report))
