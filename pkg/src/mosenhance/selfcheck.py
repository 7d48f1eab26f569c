"""Built-in consistency suites run by ``mosenhance self-check``.

Each suite returns ``(name, passed, detail)``; none of them touches the disk
except the WAV round trip, which uses a temporary directory.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint
from .corpus import quantize_pcm16, read_wav, write_wav
from .dsp import PMOS_CONFIG, SE_CONFIG, Waveform, istft, reconstruct_tensor, stft
from .layers import BlstmLayer, Linear, LstmCell, PblstmStack, blstm_forward, linear, lstm_sequence, pblstm_forward
from .numerics import Tensor, grad_check, softmax, tanh
from .pmos import pmos_attend
from .qsm import (
    FusionConfig,
    Quantizer,
    acoustic_scores,
    decode_qsm,
    encode_qsm,
    fit_transitions,
    fuse_decode,
    quantize_spectrogram,
)
from .se import cross_attend
from .training import LossConfig, compute_losses, sdr_loss_tensor

__all__ = ["run_all", "SUITES"]

GRAD_TOL = 1e-4


def _grad_cases(rng: np.random.Generator):
    cell = LstmCell.init(rng, 3, 2)
    blstm = BlstmLayer.init(rng, 3, 2)
    stack = PblstmStack.init(rng, 2, (2, 2), reduction=2)
    lin = Linear.init(rng, 3, 2)
    Q = Tensor(rng.normal(size=(4, 4)))
    W = Tensor(rng.normal(size=(4, 3)))
    H = Tensor(rng.normal(size=(3, 3)))
    ell = Linear.init(rng, 3, 3)
    phase = rng.uniform(-np.pi, np.pi, (3, SE_CONFIG.n_bins))
    ref_wave = rng.normal(size=SE_CONFIG.frame_len + 2 * SE_CONFIG.hop)
    ref_mag = np.abs(rng.normal(size=(3, SE_CONFIG.n_bins)))
    weights = Tensor(rng.normal(size=(3, 4)))
    return {
        "linear+tanh": (lambda x: tanh(linear(lin, x)).sum(), rng.normal(size=(4, 3))),
        "softmax": (lambda x: (softmax(x) * weights).sum(), rng.normal(size=(3, 4))),
        "lstm_sequence": (lambda x: (lstm_sequence(cell, x) ** 2).sum(), rng.normal(size=(4, 3))),
        "blstm": (lambda x: (blstm_forward(blstm, x) ** 2).sum(), rng.normal(size=(3, 3))),
        "pblstm": (lambda x: (pblstm_forward(stack, x) ** 2).sum(), rng.normal(size=(5, 2))),
        "pmos_attend": (lambda x: (pmos_attend(x, Q)[0] ** 2).sum(), rng.normal(size=(3, 4))),
        "cross_attend": (lambda x: (cross_attend(x, H, W, ell)[0] ** 2).sum(), rng.normal(size=(2, 4))),
        "reconstruct": (
            lambda x: (reconstruct_tensor(x, phase, SE_CONFIG) ** 2).sum(),
            np.abs(rng.normal(size=(3, SE_CONFIG.n_bins))),
        ),
        "sdr_loss": (lambda x: sdr_loss_tensor(ref_wave, x), ref_wave + 0.3 * rng.normal(size=ref_wave.size)),
        "combined_loss": (
            lambda x: compute_losses(
                x,
                ref_mag,
                reconstruct_tensor(x, phase, SE_CONFIG),
                ref_wave,
                None,
                None,
                LossConfig.for_stage("se-only"),
            ).total,
            np.abs(rng.normal(size=(3, SE_CONFIG.n_bins))) + 0.1,
        ),
    }


# quadratic in the input: central differences are exact up to roundoff, so a
# wide step keeps tiny coordinates above the cancellation floor
_WIDE_STEP = {"reconstruct": 1e-3, "combined_loss": 1e-3}


def check_gradients(seed: int = 0) -> tuple[str, bool, str]:
    worst, where = 0.0, ""
    for name, (f, x0) in _grad_cases(np.random.default_rng(seed)).items():
        res = grad_check(f, Tensor(np.array(x0, dtype=np.float64)), step=_WIDE_STEP.get(name, 1e-5))
        if not res.finite or res.max_error > worst:
            worst, where = (math.inf if not res.finite else res.max_error), name
    return "gradients", worst <= GRAD_TOL, f"max relative error {worst:.3g} ({where or 'all'})"


def _brute_force_path(ac: np.ndarray, log_trans: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    T, D = ac.shape
    best, arg = -math.inf, None
    for path in itertools.product(range(D), repeat=T):
        s = ac[0, path[0]] + mu * -math.log(D)
        for t in range(1, T):
            s += ac[t, path[t]] + mu * log_trans[path[t - 1], path[t]]
        if s > best:
            best, arg = s, path
    return best, np.array(arg)


def _path_score(ac, log_trans, mu, path) -> float:
    D = ac.shape[1]
    s = ac[0, path[0]] + mu * -math.log(D)
    for t in range(1, len(path)):
        s += ac[t, path[t]] + mu * log_trans[path[t - 1], path[t]]
    return float(s)


def check_decoder(seed: int = 0, instances: int = 30) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        D = int(rng.integers(2, 5))
        T = int(rng.integers(1, 6))
        q = Quantizer(r=float(D), step=1.0)
        probs = rng.dirichlet(np.ones(D), size=D)
        log_trans = np.log(probs)
        channel = rng.uniform(0, D, T)
        mu = float(rng.uniform(0.1, 3.0))
        path = fuse_decode(channel, q, FusionConfig(mu=mu, force_exact=True), log_trans=log_trans)
        ac = acoustic_scores(channel, q)
        best, _ = _brute_force_path(ac, log_trans, mu)
        if abs(_path_score(ac, log_trans, mu, path) - best) > 1e-9 * max(1.0, abs(best)):
            bad += 1
    return "decoder", bad == 0, f"{instances - bad}/{instances} exact-decode instances optimal"


def check_round_trips(seed: int = 0) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    problems = []
    for cfg in (SE_CONFIG, PMOS_CONFIG):
        x = rng.normal(size=16000)
        y = istft(stft(Waveform(x), cfg)).samples
        lo, hi = cfg.frame_len, len(y) - cfg.frame_len
        err = np.linalg.norm(y[lo:hi] - x[lo:hi]) / np.linalg.norm(x[lo:hi])
        if err > 1e-6:
            problems.append(f"stft {cfg.frame_len}: {err:.2g}")

    tensors = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "c": np.array(1.5)}
    raw = checkpoint.encode("selfcheck", {"k": 1}, tensors)
    kind, _, back = checkpoint.decode(raw)
    if kind != "selfcheck" or not all(np.array_equal(tensors[k], back[k]) for k in tensors):
        problems.append("checkpoint")

    q = Quantizer(r=100.0, step=12.5)
    mags = [np.abs(rng.normal(size=(6, 5))) for _ in range(3)]
    model = fit_transitions([quantize_spectrogram(q, m) for m in mags], q)
    blob = encode_qsm(model)
    if encode_qsm(decode_qsm(blob)) != blob:
        problems.append("qsm")

    w = Waveform(quantize_pcm16(0.3 * rng.uniform(-1, 1, 800)))
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.wav"
        write_wav(p, w)
        if not np.array_equal(read_wav(p).samples, w.samples):
            problems.append("wav")
    return "round-trips", not problems, "ok" if not problems else ", ".join(problems)


def check_attention(seed: int = 0) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    H = Tensor(rng.normal(size=(5, 4)))
    _, alpha = pmos_attend(H, Tensor(rng.normal(size=(4, 4))))
    _, uniform = pmos_attend(H, Tensor(np.zeros((4, 4))))
    G = Tensor(rng.normal(size=(3, 6)))
    _, beta = cross_attend(G, H, Tensor(rng.normal(size=(6, 4))), Linear(Tensor(np.eye(4)), Tensor(np.zeros(4))))
    ok = (
        np.abs(alpha.data.sum(axis=1) - 1).max() <= 1e-12
        and np.abs(beta.data.sum(axis=1) - 1).max() <= 1e-12
        and np.array_equal(uniform.data, np.full((5, 5), 0.2))
    )
    return "attention", bool(ok), "rows normalized, zero scores uniform" if ok else "normalization failed"


SUITES = (check_gradients, check_decoder, check_round_trips, check_attention)


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    return [suite(seed) for suite in SUITES]
