"""MOS prediction network: pyramid BLSTM encoder, self-attention, FC head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .dsp import PMOS_CONFIG, Waveform, normalize_features, require_rate, stft
from .errors import LengthError
from .layers import Linear, PblstmStack, linear, pblstm_forward, pyramid_length
from .numerics import Tensor, matmul, softmax, tanh

__all__ = [
    "PmosConfig",
    "PmosModel",
    "MosScore",
    "MOS_MIN",
    "MOS_MAX",
    "pmos_features",
    "pmos_encode",
    "pmos_attend",
    "pmos_head",
    "pmos_forward",
    "pmos_predict",
    "save_pmos",
    "load_pmos",
]

MOS_MIN, MOS_MAX = 0.0, 10.0


@dataclass(frozen=True)
class PmosConfig:
    n_bins: int = PMOS_CONFIG.n_bins
    front_dim: int = 256
    hidden_dims: tuple[int, ...] = (128, 64, 32)
    reduction: int = 2
    fc_dim: int = 32

    @property
    def embed_dim(self) -> int:
        return 2 * self.hidden_dims[-1]

    def hparams(self) -> dict[str, object]:
        d = asdict(self)
        d["hidden_dims"] = ",".join(map(str, self.hidden_dims))
        return d

    @classmethod
    def from_hparams(cls, h: dict[str, str]) -> "PmosConfig":
        return cls(
            n_bins=int(h["n_bins"]),
            front_dim=int(h["front_dim"]),
            hidden_dims=tuple(int(x) for x in h["hidden_dims"].split(",")),
            reduction=int(h["reduction"]),
            fc_dim=int(h["fc_dim"]),
        )


@dataclass
class PmosModel:
    config: PmosConfig
    front: Linear
    encoder: PblstmStack
    Q: Tensor  # embed_dim x embed_dim
    fc: Linear
    out: Linear

    @classmethod
    def init(cls, config: PmosConfig, seed: int = 0) -> "PmosModel":
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        model = cls(
            config=config,
            front=Linear.init(rng, config.n_bins, config.front_dim),
            encoder=PblstmStack.init(rng, config.front_dim, config.hidden_dims, config.reduction),
            Q=Tensor(rng.uniform(-1, 1, (d, d)) / d, requires_grad=True),
            fc=Linear.init(rng, d, config.fc_dim),
            out=Linear.init(rng, config.fc_dim, 1),
        )
        # start predictions at the middle of the MOS scale
        model.out.bias.data[:] = 0.5 * (MOS_MIN + MOS_MAX)
        return model

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.front.named_parameters("front"))
        params.update(self.encoder.named_parameters("encoder"))
        params["Q"] = self.Q
        params.update(self.fc.named_parameters("fc"))
        params.update(self.out.named_parameters("out"))
        return params


@dataclass(frozen=True)
class MosScore:
    value: float

    def __float__(self) -> float:
        return self.value


def pmos_features(w: Waveform) -> np.ndarray:
    """Mean-variance normalized PMOS magnitude spectrogram, ``T x 257``."""
    require_rate(w)
    feats, _ = normalize_features(stft(w, PMOS_CONFIG).magnitude)
    return feats


def pmos_encode(model: PmosModel, feats) -> Tensor:
    """Embeddings ``H``: ``ceil(T / reduction**L) x embed_dim``."""
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise LengthError("pmos_encode needs at least one feature frame")
    h = tanh(linear(model.front, feats))
    H = pblstm_forward(model.encoder, h)
    expected = pyramid_length(feats.shape[0], model.config.reduction, len(model.config.hidden_dims))
    assert H.shape[0] == expected
    return H


def pmos_attend(H: Tensor, Q: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear self-attention; returns ``(contexts, alpha)``.

    ``alpha[i, k]`` is a softmax over k of ``h_i^T Q h_k``; ``context_i`` is
    the alpha-weighted sum of the rows of ``H``.
    """
    scores = matmul(matmul(H, Q), H.T)
    alpha = softmax(scores)
    return matmul(alpha, H), alpha


def pmos_head(model: PmosModel, contexts: Tensor) -> Tensor:
    """Mean-pool the contexts and map to an (unclamped) scalar MOS."""
    pooled = contexts.mean(axis=0)
    return linear(model.out, tanh(linear(model.fc, pooled))).sum()


def pmos_forward(model: PmosModel, feats) -> tuple[Tensor, Tensor]:
    """Return ``(mos, H)`` with the MOS left unclamped for training."""
    H = pmos_encode(model, feats)
    contexts, _ = pmos_attend(H, model.Q)
    return pmos_head(model, contexts), H


def pmos_predict(model: PmosModel, w: Waveform) -> MosScore:
    mos, _ = pmos_forward(model, pmos_features(w))
    return MosScore(float(np.clip(mos.item(), MOS_MIN, MOS_MAX)))


def save_pmos(model: PmosModel, path) -> None:
    tensors = {k: t.data for k, t in model.parameters().items()}
    checkpoint.save(path, "pmos", model.config.hparams(), tensors)


def load_pmos(path) -> PmosModel:
    hparams, tensors = checkpoint.load(path, "pmos")
    model = PmosModel.init(PmosConfig.from_hparams(hparams))
    checkpoint.assign(model.parameters(), tensors, "pmos")
    return model
