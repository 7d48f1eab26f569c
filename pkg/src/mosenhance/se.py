"""Enhancement network conditioned on PMOS embeddings, and the enhance pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .dsp import SE_CONFIG, Waveform, normalize_features, reconstruct_with_phase, require_rate, stft
from .errors import ConfigError, ShapeError
from .layers import BlstmLayer, Linear, blstm_forward, linear
from .numerics import Tensor, concat, matmul, no_tape, relu, softmax, tanh
from .pmos import PmosModel, pmos_encode, pmos_features
from .qsm import FusionConfig, TransitionModel, fuse_spectrogram

__all__ = [
    "SeConfig",
    "SeModel",
    "EnhancedUtterance",
    "se_features",
    "se_encode",
    "cross_attend",
    "se_decode",
    "se_forward",
    "enhance",
    "save_se",
    "load_se",
]


@dataclass(frozen=True)
class SeConfig:
    n_bins: int = SE_CONFIG.n_bins
    pmos_embed_dim: int = 64
    encoder_hidden: int = 200
    encoder_layers: int = 2
    decoder_linear: int = 400
    decoder_hidden: int = 200
    decoder_layers: int = 2

    @property
    def embed_dim(self) -> int:
        return 2 * self.encoder_hidden

    def hparams(self) -> dict[str, object]:
        return asdict(self)

    @classmethod
    def from_hparams(cls, h: dict[str, str]) -> "SeConfig":
        return cls(**{k: int(v) for k, v in h.items()})


@dataclass
class SeModel:
    config: SeConfig
    encoder: list[BlstmLayer]
    W: Tensor  # embed_dim x pmos_embed_dim
    ell: Linear  # pmos_embed_dim -> pmos_embed_dim
    dec_in: Linear
    decoder: list[BlstmLayer]
    out: Linear

    @classmethod
    def init(cls, config: SeConfig, seed: int = 0) -> "SeModel":
        rng = np.random.default_rng(seed)
        enc = []
        d = config.n_bins
        for _ in range(config.encoder_layers):
            enc.append(BlstmLayer.init(rng, d, config.encoder_hidden))
            d = 2 * config.encoder_hidden
        dg, dh = config.embed_dim, config.pmos_embed_dim
        W = Tensor(rng.uniform(-1, 1, (dg, dh)) / np.sqrt(dg * dh), requires_grad=True)
        dec = []
        d = config.decoder_linear
        for _ in range(config.decoder_layers):
            dec.append(BlstmLayer.init(rng, d, config.decoder_hidden))
            d = 2 * config.decoder_hidden
        return cls(
            config=config,
            encoder=enc,
            W=W,
            ell=Linear.init(rng, dh, dh),
            dec_in=Linear.init(rng, dh + dg, config.decoder_linear),
            decoder=dec,
            out=Linear.init(rng, d, config.n_bins),
        )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder):
            params.update(layer.named_parameters(f"encoder.{i}"))
        params["W"] = self.W
        params.update(self.ell.named_parameters("ell"))
        params.update(self.dec_in.named_parameters("dec_in"))
        for i, layer in enumerate(self.decoder):
            params.update(layer.named_parameters(f"decoder.{i}"))
        params.update(self.out.named_parameters("out"))
        return params


@dataclass
class EnhancedUtterance:
    est_magnitude: np.ndarray  # T x F, decoder output
    magnitude: np.ndarray  # magnitude actually reconstructed (fused or not)
    waveform: Waveform
    levels: np.ndarray | None = None


def se_features(mix_mag: np.ndarray) -> np.ndarray:
    """Encoder input: the mixture magnitude, mean-variance normalized per utterance."""
    feats, _ = normalize_features(mix_mag)
    return feats


def se_encode(model: SeModel, feats) -> Tensor:
    """One ``embed_dim`` embedding per input frame (no time reduction)."""
    g = feats if isinstance(feats, Tensor) else Tensor(feats)
    for layer in model.encoder:
        g = blstm_forward(layer, g)
    return g


def cross_attend(G: Tensor, H: Tensor, W: Tensor, ell: Linear) -> tuple[Tensor, Tensor]:
    """Attend from SE frames into PMOS embeddings; returns ``(C, alpha)``.

    ``alpha[t, tau]`` is a softmax over tau of ``g_t^T W h_tau`` and
    ``c_t = sum_tau alpha[t, tau] * ell(h_tau)``.
    """
    if G.shape[1] != W.shape[0] or H.shape[1] != W.shape[1]:
        raise ShapeError(f"cross_attend: G {G.shape}, W {W.shape}, H {H.shape} disagree")
    alpha = softmax(matmul(matmul(G, W), H.T))
    return matmul(alpha, linear(ell, H)), alpha


def se_decode(model: SeModel, C: Tensor, G: Tensor) -> Tensor:
    if C.shape[0] != G.shape[0]:
        raise ShapeError("se_decode: context and embedding sequences differ in length")
    x = tanh(linear(model.dec_in, concat([C, G], axis=1)))
    for layer in model.decoder:
        x = blstm_forward(layer, x)
    return relu(linear(model.out, x))


def se_forward(model: SeModel, se_feats, H: Tensor) -> Tensor:
    G = se_encode(model, se_feats)
    C, _ = cross_attend(G, H, model.W, model.ell)
    return se_decode(model, C, G)


def enhance(
    pmos: PmosModel,
    se: SeModel,
    mixture: Waveform,
    qsm: TransitionModel | None = None,
    fusion: FusionConfig | None = None,
    workers: int = 1,
) -> EnhancedUtterance:
    """Enhance ``mixture``; shallow fusion runs only when ``fusion.mu > 0``."""
    require_rate(mixture)
    if fusion is not None and fusion.mu > 0 and qsm is None:
        raise ConfigError("mu > 0 but no trained QSM was supplied", field="qsm")
    spec = stft(mixture, SE_CONFIG)
    with no_tape():
        H = pmos_encode(pmos, pmos_features(mixture))
        est = se_forward(se, se_features(spec.magnitude), H).data
    mag, levels = est, None
    if fusion is not None and fusion.mu > 0:
        mag, levels = fuse_spectrogram(est, qsm, fusion, workers)
    wav = reconstruct_with_phase(mag, spec.phase, SE_CONFIG)
    return EnhancedUtterance(est, mag, wav, levels)


def save_se(model: SeModel, path) -> None:
    tensors = {k: t.data for k, t in model.parameters().items()}
    checkpoint.save(path, "se", model.config.hparams(), tensors)


def load_se(path) -> SeModel:
    hparams, tensors = checkpoint.load(path, "se")
    model = SeModel.init(SeConfig.from_hparams(hparams))
    checkpoint.assign(model.parameters(), tensors, "se")
    return model
