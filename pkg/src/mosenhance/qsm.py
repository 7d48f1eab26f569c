"""Quantized spectral bigram model and shallow-fusion decoding.

A clean magnitude spectrogram is min-max scaled onto ``[0, r]`` and cut into
``D = r / step`` levels. For every frequency channel we count level-to-level
transitions between consecutive frames, smooth each row with simple
Good-Turing and store only the observed successors plus a per-row mass for
each unseen successor.

Decoding maximizes, per channel,
``sum_t acoustic(t, d_t) + mu * sum_t log P(d_t | d_{t-1})`` with a Gaussian
acoustic score around the network's continuous estimate.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError

__all__ = [
    "Quantizer",
    "NormState",
    "QuantizedSpectrogram",
    "SmoothedRow",
    "TransitionModel",
    "FusionConfig",
    "normalize_scale",
    "denormalize",
    "quantize",
    "dequantize",
    "quantize_spectrogram",
    "good_turing_smooth",
    "fit_transitions",
    "fuse_decode",
    "viterbi",
    "beam_decode",
    "acoustic_scores",
    "fuse_spectrogram",
    "save_qsm",
    "load_qsm",
    "encode_qsm",
    "decode_qsm",
]

SMOOTHING_GOOD_TURING = 1
QSM_MAGIC = b"QSM\x00"
QSM_VERSION = 1


@dataclass(frozen=True)
class Quantizer:
    r: float = 100.0
    step: float = 0.0625

    def __post_init__(self):
        if self.r <= 0 or self.step <= 0:
            raise ContractError("quantizer range and step must be positive")
        d = self.r / self.step
        if d != round(d) or d < 2:
            raise ContractError(f"r / step must be an integer >= 2, got {d}")

    @property
    def levels(self) -> int:
        return int(round(self.r / self.step))

    def centers(self) -> np.ndarray:
        return (np.arange(self.levels) + 0.5) * self.step


@dataclass(frozen=True)
class NormState:
    lo: float
    hi: float
    r: float
    degenerate: bool = False


@dataclass
class QuantizedSpectrogram:
    levels: np.ndarray  # T x F int64
    norm_state: NormState


def normalize_scale(mag: np.ndarray, r: float = 100.0, bounds: tuple[float, float] | None = None):
    """Min-max map ``mag`` onto ``[0, r]``.

    ``bounds`` overrides the per-utterance min/max (corpus-global scaling).
    A constant input maps to zeros with ``degenerate`` set.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if not np.isfinite(mag).all() or (mag < 0).any():
        raise ContractError("normalize_scale needs finite nonnegative magnitudes")
    lo, hi = bounds if bounds is not None else (float(mag.min()), float(mag.max()))
    if hi <= lo:
        return np.zeros_like(mag), NormState(lo, lo, r, degenerate=True)
    scaled = np.clip((mag - lo) / (hi - lo) * r, 0.0, r)
    return scaled, NormState(lo, hi, r)


def denormalize(scaled: np.ndarray, state: NormState) -> np.ndarray:
    if state.degenerate:
        return np.full_like(np.asarray(scaled, dtype=np.float64), state.lo)
    return np.asarray(scaled) / state.r * (state.hi - state.lo) + state.lo


def quantize(q: Quantizer, scaled: np.ndarray) -> np.ndarray:
    """Level index ``min(floor(v / step), D - 1)``."""
    scaled = np.asarray(scaled, dtype=np.float64)
    if (scaled < 0).any() or (scaled > q.r).any():
        raise ContractError(f"quantize: values must lie in [0, {q.r}]")
    return np.minimum(np.floor(scaled / q.step).astype(np.int64), q.levels - 1)


def level_centers(q: Quantizer, levels: np.ndarray) -> np.ndarray:
    return (np.asarray(levels) + 0.5) * q.step


def dequantize(q: Quantizer, levels: np.ndarray, state: NormState) -> np.ndarray:
    return denormalize(level_centers(q, levels), state)


def quantize_spectrogram(q: Quantizer, mag: np.ndarray, bounds=None) -> QuantizedSpectrogram:
    scaled, state = normalize_scale(mag, q.r, bounds)
    return QuantizedSpectrogram(quantize(q, scaled), state)


@dataclass
class SmoothedRow:
    """Observed successors with their probabilities, plus the per-entry mass of
    each unseen successor."""

    successors: np.ndarray  # sorted int64
    probs: np.ndarray
    unseen: float

    def dense(self, D: int) -> np.ndarray:
        row = np.full(D, self.unseen)
        row[self.successors] = self.probs
        return row

    def total(self, D: int) -> float:
        return float(self.probs.sum() + self.unseen * (D - len(self.successors)))


def good_turing_smooth(counts: dict[int, int], D: int) -> SmoothedRow:
    """Simple Good-Turing re-estimate of one transition row.

    Seen counts ``r`` become ``(r + 1) N_{r+1} / N_r`` when ``N_{r+1} > 0`` and
    stay ``r`` otherwise; the unseen successors share ``N_1 / N`` uniformly and
    the seen entries are rescaled to fill the rest. When every observation is a
    singleton (unseen mass would be 1) the raw counts are kept and the whole
    row, seen ML mass plus ``N_1 / N``, is renormalized. Without singletons the
    unseen share is ``1 / (N + 1)`` so no successor is left at zero.
    """
    counts = {int(k): int(v) for k, v in counts.items() if v > 0}
    if any(k < 0 or k >= D for k in counts):
        raise ContractError("successor index out of range")
    n_seen = len(counts)
    N = sum(counts.values())
    if N == 0:
        return SmoothedRow(np.array([], dtype=np.int64), np.array([]), 1.0 / D)
    succ = np.array(sorted(counts), dtype=np.int64)
    r = np.array([counts[k] for k in succ], dtype=np.float64)
    freq = Counter(counts.values())
    n_unseen = D - n_seen
    if n_unseen == 0:
        return SmoothedRow(succ, r / N, 0.0)

    n1 = freq.get(1, 0)
    if n1 == N:
        # all singletons: keep ML, append N_1/N, renormalize
        total = 1.0 + n1 / N
        return SmoothedRow(succ, (r / N) / total, (n1 / N) / total / n_unseen)

    adjusted = np.array(
        [(k + 1) * freq[k + 1] / freq[k] if freq.get(k + 1, 0) > 0 else float(k) for k in r.astype(int)]
    )
    p0 = n1 / N if n1 > 0 else 1.0 / (N + 1)
    seen = adjusted / adjusted.sum() * (1.0 - p0)
    return SmoothedRow(succ, seen, p0 / n_unseen)


@dataclass
class TransitionModel:
    """Per-channel smoothed bigram rows; absent rows back off to uniform."""

    quantizer: Quantizer
    n_channels: int
    rows: list[dict[int, SmoothedRow]] = field(default_factory=list)
    smoothing: int = SMOOTHING_GOOD_TURING

    @property
    def levels(self) -> int:
        return self.quantizer.levels

    def row(self, f: int, prev: int) -> SmoothedRow:
        hit = self.rows[f].get(prev)
        if hit is None:
            return SmoothedRow(np.array([], dtype=np.int64), np.array([]), 1.0 / self.levels)
        return hit

    def prob(self, f: int, prev: int, nxt: int) -> float:
        row = self.row(f, prev)
        j = np.searchsorted(row.successors, nxt)
        if j < len(row.successors) and row.successors[j] == nxt:
            return float(row.probs[j])
        return row.unseen

    def log_matrix(self, f: int) -> np.ndarray:
        """Dense ``D x D`` log-probabilities for channel ``f`` (row = previous)."""
        D = self.levels
        mat = np.full((D, D), -math.log(D))
        for prev, row in self.rows[f].items():
            mat[prev] = np.log(row.dense(D))
        return mat


def _channel_counts(sequences: Sequence[np.ndarray], D: int) -> dict[int, dict[int, int]]:
    codes = np.concatenate([seq[:-1] * D + seq[1:] for seq in sequences])
    uniq, cnt = np.unique(codes, return_counts=True)
    rows: dict[int, dict[int, int]] = {}
    for code, c in zip(uniq.tolist(), cnt.tolist()):
        rows.setdefault(code // D, {})[code % D] = c
    return rows


def _fit_channel(args) -> dict[int, SmoothedRow]:
    sequences, D = args
    return {prev: good_turing_smooth(c, D) for prev, c in _channel_counts(sequences, D).items()}


def fit_transitions(corpus: Iterable[QuantizedSpectrogram], q: Quantizer, workers: int = 1) -> TransitionModel:
    corpus = [u for u in corpus if u.levels.shape[0] >= 2]
    if not corpus:
        raise DataError("fit_transitions needs at least one utterance with two or more frames")
    F = corpus[0].levels.shape[1]
    if any(u.levels.shape[1] != F for u in corpus):
        raise DataError("utterances disagree on the number of frequency channels")
    D = q.levels
    jobs = [([u.levels[:, f] for u in corpus], D) for f in range(F)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_fit_channel, jobs))
    else:
        rows = [_fit_channel(j) for j in jobs]
    return TransitionModel(q, F, rows)


@dataclass(frozen=True)
class FusionConfig:
    mu: float = 0.01
    acoustic_sigma: float | None = None  # defaults to one quantization step
    beam_width: int = 8
    exact_threshold: int = 64
    force_exact: bool = False

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError("fusion weight mu must be >= 0", field="mu")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1", field="beam_width")


def acoustic_scores(channel: np.ndarray, q: Quantizer, sigma: float | None = None) -> np.ndarray:
    """``T x D`` unnormalized Gaussian log-scores of each level center."""
    s = q.step if sigma is None else sigma
    diff = q.centers()[None, :] - np.asarray(channel, dtype=np.float64)[:, None]
    return -(diff**2) / (2 * s * s)


def viterbi(ac: np.ndarray, log_trans: np.ndarray, mu: float) -> np.ndarray:
    """Exact best path; ties go to the lowest level index."""
    T, D = ac.shape
    lm = mu * log_trans
    delta = ac[0] + mu * -math.log(D)
    back = np.zeros((T, D), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + lm
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(D)] + ac[t]
    path = np.zeros(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def beam_decode(ac: np.ndarray, log_row, mu: float, beam: int) -> np.ndarray:
    """Viterbi restricted to the ``beam`` best states per frame.

    ``log_row(prev)`` returns the length-D log transition row. Equal to
    :func:`viterbi` whenever ``beam >= D``.
    """
    T, D = ac.shape
    score = ac[0] + mu * -math.log(D)
    states = np.argsort(-score, kind="stable")[:beam]
    scores = score[states]
    history: list[tuple[np.ndarray, np.ndarray]] = []
    for t in range(1, T):
        rows = np.stack([log_row(int(s)) for s in states])
        cand = scores[:, None] + mu * rows
        best_src = np.argmax(cand, axis=0)
        total = cand[best_src, np.arange(D)] + ac[t]
        keep = np.argsort(-total, kind="stable")[:beam]
        history.append((states[best_src[keep]], keep))
        states, scores = keep, total[keep]
    path = np.zeros(T, dtype=np.int64)
    cur = int(states[0]) if T == 1 else int(states[np.argmax(scores)])
    path[-1] = cur
    for t in range(T - 1, 0, -1):
        prev_states, kept = history[t - 1]
        cur = int(prev_states[np.where(kept == cur)[0][0]])
        path[t - 1] = cur
    return path


def fuse_decode(
    channel: np.ndarray,
    q: Quantizer,
    cfg: FusionConfig,
    model: TransitionModel | None = None,
    f: int = 0,
    log_trans: np.ndarray | None = None,
) -> np.ndarray:
    """Shallow-fusion level sequence for one frequency channel.

    ``channel`` is the network estimate in scaled units. Transitions come from
    ``log_trans`` (a dense ``D x D`` log matrix) or from channel ``f`` of
    ``model``.
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 1 or len(channel) < 1:
        raise ContractError("fuse_decode needs a non-empty 1-D channel")
    ac = acoustic_scores(channel, q, cfg.acoustic_sigma)
    if cfg.mu == 0:
        return np.argmax(ac, axis=1)
    if model is None and log_trans is None:
        raise ConfigError("mu > 0 requires a trained transition model", field="qsm")
    D = q.levels
    if cfg.force_exact or D <= cfg.exact_threshold:
        if log_trans is None:
            log_trans = model.log_matrix(f)
        return viterbi(ac, log_trans, cfg.mu)
    if log_trans is not None:
        return beam_decode(ac, lambda s: log_trans[s], cfg.mu, cfg.beam_width)
    return beam_decode(ac, lambda s: np.log(model.row(f, s).dense(D)), cfg.mu, cfg.beam_width)


def fuse_spectrogram(
    est_mag: np.ndarray, model: TransitionModel | None, cfg: FusionConfig, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Decode every channel of ``est_mag``; returns ``(fused_mag, levels)``."""
    if cfg.mu > 0 and model is None:
        raise ConfigError("mu > 0 requires a trained transition model", field="qsm")
    if model is None:
        raise ConfigError("fusion needs a transition model", field="qsm")
    q = model.quantizer
    if est_mag.shape[1] != model.n_channels:
        raise ConfigError(
            f"QSM has {model.n_channels} channels, spectrogram has {est_mag.shape[1]}", field="qsm"
        )
    scaled, state = normalize_scale(est_mag, q.r)

    def run(f):
        return fuse_decode(scaled[:, f], q, cfg, model, f)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(run, range(est_mag.shape[1])))
    else:
        cols = [run(f) for f in range(est_mag.shape[1])]
    levels = np.stack(cols, axis=1)
    return dequantize(q, levels, state), levels


# --- file format ---------------------------------------------------------

_HEADER = struct.Struct("<4sIIIddI")
_ROW = struct.Struct("<II")


def encode_qsm(model: TransitionModel) -> bytes:
    q = model.quantizer
    parts = [_HEADER.pack(QSM_MAGIC, QSM_VERSION, model.n_channels, q.levels, q.r, q.step, model.smoothing)]
    for rows in model.rows:
        parts.append(struct.pack("<I", len(rows)))
        for prev in sorted(rows):
            row = rows[prev]
            parts.append(_ROW.pack(prev, len(row.successors)))
            pairs = np.empty((len(row.successors), 2), dtype="<f8")
            pairs[:, 0] = row.successors
            pairs[:, 1] = row.probs
            parts.append(pairs.tobytes())
            parts.append(struct.pack("<d", row.unseen))
    return b"".join(parts)


def decode_qsm(raw: bytes) -> TransitionModel:
    if len(raw) < _HEADER.size:
        raise FormatError("QSM file too short", field="header")
    magic, version, F, D, r, step, smoothing = _HEADER.unpack_from(raw, 0)
    if magic != QSM_MAGIC:
        raise FormatError("bad QSM magic", field="magic")
    if version != QSM_VERSION:
        raise ConfigError(f"QSM version {version}, expected {QSM_VERSION}", field="version")
    q = Quantizer(r, step)
    if q.levels != D:
        raise FormatError(f"QSM header D={D} disagrees with r/step", field="D")
    off = _HEADER.size
    channels = []
    try:
        for _ in range(F):
            (n_rows,) = struct.unpack_from("<I", raw, off)
            off += 4
            rows = {}
            for _ in range(n_rows):
                prev, n = _ROW.unpack_from(raw, off)
                off += _ROW.size
                pairs = np.frombuffer(raw, dtype="<f8", count=2 * n, offset=off).reshape(n, 2)
                off += 16 * n
                (unseen,) = struct.unpack_from("<d", raw, off)
                off += 8
                rows[prev] = SmoothedRow(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.float64), unseen)
            channels.append(rows)
    except (struct.error, ValueError):
        raise FormatError("truncated QSM file", field="rows") from None
    if off != len(raw):
        raise FormatError("trailing bytes in QSM file", field="rows")
    return TransitionModel(q, F, channels, smoothing)


def save_qsm(model: TransitionModel, path) -> None:
    Path(path).write_bytes(encode_qsm(model))


def load_qsm(path) -> TransitionModel:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"QSM file not found: {p}", field="qsm")
    return decode_qsm(p.read_bytes())
