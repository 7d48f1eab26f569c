"""WAV I/O, SNR mixing, the synthetic corpus and listener-rating aggregation."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import SAMPLE_RATE, Waveform
from .errors import DataError, FormatError

__all__ = [
    "Utterance",
    "CorpusSpec",
    "read_wav",
    "write_wav",
    "quantize_pcm16",
    "Mixture",
    "mix_at_snr",
    "measured_snr",
    "pseudo_mos",
    "synth_corpus",
    "assign_splits",
    "aggregate_ratings",
    "RatingSummary",
    "ManifestRow",
    "write_manifest",
    "read_manifest",
    "save_corpus",
    "load_corpus",
]

PCM_SCALE = 32768.0
SPLITS = ("train", "validation", "test")


# --- WAV -----------------------------------------------------------------


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round onto the 16-bit grid (clipping to the representable range)."""
    ints = np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767)
    return ints / PCM_SCALE


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})", field="format") from None
    except EOFError:
        raise FormatError(f"{path}: truncated WAV file", field="format") from None
    if channels != 1:
        raise FormatError(f"{path}: {channels} channels, expected mono", field="channels")
    if width != 2:
        raise FormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM", field="sample_width")
    if expected_rate is not None and rate != expected_rate:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz", field="sample_rate")
    ints = np.frombuffer(frames, dtype="<i2")
    return Waveform(ints.astype(np.float64) / PCM_SCALE, rate)


def write_wav(path, w: Waveform) -> None:
    ints = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())


# --- mixing --------------------------------------------------------------


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def _snap(x: np.ndarray, quantum: float) -> np.ndarray:
    return np.round(x / quantum) * quantum


@dataclass
class Mixture:
    mixture: Waveform
    clean: Waveform
    noise: Waveform  # gain-scaled noise component
    gain: float


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Mixture:
    """Scale ``noise`` so that ``clean + gain * noise`` has the requested SNR.

    Both components are snapped to a common binary grid (2**-52 of their
    joint range), which moves the SNR by ~1e-15 dB but makes
    ``mixture - noise == clean`` hold exactly in double precision. PCM-derived
    signals already lie on that grid, so their clean part is unchanged.
    """
    if clean.sample_rate != noise.sample_rate:
        raise DataError("clean and noise sample rates differ")
    n = len(clean)
    if len(noise) < n:
        raise DataError(f"noise ({len(noise)} samples) shorter than clean ({n})")
    raw = noise.samples[:n]
    ec, en = _energy(clean.samples), _energy(raw)
    if ec == 0 or en == 0:
        raise DataError("zero-energy clean or noise signal")
    gain = math.sqrt(ec / (en * 10 ** (snr_db / 10)))
    scaled = gain * raw
    bound = float(np.abs(clean.samples).max() + np.abs(scaled).max())
    quantum = 2.0 ** (math.ceil(math.log2(bound)) + 1 - 52)
    c = _snap(clean.samples, quantum)
    scaled = _snap(scaled, quantum)
    rate = clean.sample_rate
    return Mixture(Waveform(c + scaled, rate), Waveform(c, rate), Waveform(scaled, rate), gain)


def measured_snr(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10 * math.log10(_energy(clean) / _energy(noise))


# --- synthetic corpus ----------------------------------------------------


def pseudo_mos(snr_db: float) -> float:
    """Stand-in quality label: ``clamp(5 + snr_db / 3, 0, 10)``."""
    return float(min(10.0, max(0.0, 5.0 + snr_db / 3.0)))


@dataclass
class Utterance:
    id: str
    clean: Waveform
    noise: Waveform  # noise component as present in the mixture
    mixture: Waveform
    snr_db: float
    mos_label: float
    split: str = "train"


@dataclass(frozen=True)
class CorpusSpec:
    count: int = 10
    duration: float = 1.0
    snr_range: tuple[float, float] = (-5.0, 10.0)
    seed: int = 0
    peak: float = 0.05
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)


def _harmonic_bursts(rng: np.random.Generator, n: int, rate: int, peak: float) -> np.ndarray:
    t = np.arange(n) / rate
    x = np.zeros(n)
    n_bursts = int(rng.integers(2, 5))
    for _ in range(n_bursts):
        length = min(n, int(rng.uniform(0.15, 0.4) * rate))
        start = int(rng.integers(0, max(1, n - length)))
        f0 = rng.uniform(110.0, 320.0)
        env = np.sin(np.pi * np.arange(length) / length) ** 2
        seg = np.zeros(length)
        for k in range(1, 9):
            if k * f0 >= rate / 2:
                break
            seg += rng.uniform(0.3, 1.0) / k * np.sin(2 * np.pi * k * f0 * t[:length] + rng.uniform(0, 2 * np.pi))
        stop = min(n, start + length)
        x[start:stop] += (env * seg)[: stop - start]
    return quantize_pcm16(x / np.abs(x).max() * peak)


def _broadband_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    white = rng.standard_normal(n + 8)
    taps = rng.uniform(0.0, 1.0, 8)
    colored = np.convolve(white, taps / np.linalg.norm(taps), mode="valid")[:n]
    return quantize_pcm16(0.1 * colored)


def assign_splits(n: int, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> list[str]:
    """Shuffle ``n`` items into train/validation/test with rounded counts."""
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    labels = ["train"] * n_train + ["validation"] * n_val + ["test"] * (n - n_train - n_val)
    order = np.random.default_rng(seed).permutation(n)
    out = [""] * n
    for label, i in zip(labels, order):
        out[i] = label
    return out


def synth_corpus(spec: CorpusSpec = CorpusSpec()) -> list[Utterance]:
    """Deterministic synthetic corpus: harmonic bursts in seeded broadband noise."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * SAMPLE_RATE))
    lo, hi = spec.snr_range
    snrs = np.linspace(lo, hi, spec.count) if spec.count > 1 else np.array([lo])
    splits = assign_splits(spec.count, spec.splits, spec.seed)
    utts = []
    for i in range(spec.count):
        clean = Waveform(_harmonic_bursts(rng, n, SAMPLE_RATE, spec.peak))
        noise = Waveform(_broadband_noise(rng, n))
        mix = mix_at_snr(clean, noise, float(snrs[i]))
        # keep every component on the 16-bit grid so the decomposition survives WAV storage
        scaled = quantize_pcm16(mix.noise.samples)
        mixture = clean.samples + scaled
        if np.abs(mixture).max() >= 1.0:
            raise DataError(f"utterance {i} clips at 16-bit PCM; lower the peak level", field="peak")
        snr = measured_snr(clean.samples, scaled)
        utts.append(
            Utterance(f"utt{i:04d}", clean, Waveform(scaled), Waveform(mixture), snr, pseudo_mos(snr), splits[i])
        )
    return utts


# --- ratings -------------------------------------------------------------


@dataclass
class RatingSummary:
    mos: dict[str, float]
    excluded: list[str]
    dropped: dict[str, int]


def aggregate_ratings(ratings: dict[str, Sequence[float]], zmax: float = 2.5) -> RatingSummary:
    """Z-score prune per utterance, min-max scale corpus-wide to [0, 10], average."""
    kept: dict[str, np.ndarray] = {}
    excluded, dropped = [], {}
    for uid, scores in ratings.items():
        x = np.asarray(scores, dtype=np.float64)
        if x.size == 0:
            excluded.append(uid)
            continue
        sd = x.std()
        mask = np.ones(x.size, bool) if sd == 0 else np.abs((x - x.mean()) / sd) <= zmax
        dropped[uid] = int((~mask).sum())
        if not mask.any():
            excluded.append(uid)
            continue
        kept[uid] = x[mask]
    if not kept:
        raise DataError("no ratings survive pruning")
    lo = min(float(v.min()) for v in kept.values())
    hi = max(float(v.max()) for v in kept.values())
    if hi == lo:
        raise DataError("all surviving ratings are equal; min-max scaling is undefined")
    mos = {uid: float(((v - lo) / (hi - lo) * 10.0).mean()) for uid, v in kept.items()}
    return RatingSummary(mos, excluded, dropped)


# --- manifest ------------------------------------------------------------


@dataclass
class ManifestRow:
    id: str
    clean: str
    noise: str
    mixture: str
    snr_db: float
    mos_label: float
    split: str


MANIFEST_HEADER = "# id\tclean\tnoise\tmixture\tsnr_db\tmos_label\tsplit"


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    lines = [MANIFEST_HEADER]
    for r in rows:
        lines.append("\t".join([r.id, r.clean, r.noise, r.mixture, repr(r.snr_db), repr(r.mos_label), r.split]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}", field="manifest")
        uid, clean, noise, mix, snr, mos, split = parts
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}", field="split")
        rows.append(ManifestRow(uid, clean, noise, mix, float(snr), float(mos), split))
    return rows


def save_corpus(utts: Sequence[Utterance], out_dir) -> Path:
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for u in utts:
        names = {}
        for part in ("clean", "noise", "mixture"):
            names[part] = f"wav/{u.id}_{part}.wav"
            write_wav(out / names[part], getattr(u, part))
        rows.append(ManifestRow(u.id, names["clean"], names["noise"], names["mixture"], u.snr_db, u.mos_label, u.split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def load_corpus(manifest) -> list[Utterance]:
    base = Path(manifest).parent
    utts = []
    for r in read_manifest(manifest):
        utts.append(
            Utterance(
                r.id,
                read_wav(base / r.clean),
                read_wav(base / r.noise),
                read_wav(base / r.mixture),
                r.snr_db,
                r.mos_label,
                r.split,
            )
        )
    return utts
