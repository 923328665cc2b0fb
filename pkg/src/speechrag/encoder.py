"""The two embedding branches sharing one frozen backbone.

Text branch: tokens -> token embeddings -> backbone -> mean pool -> e_t.
Speech branch: log-mel features -> trainable speech encoder -> adapter
(downsample + project, see adapter module) -> backbone -> mean pool -> e_s.

The backbone is a small fixed-seed residual mixer. It is frozen: training
never writes to it, and it is regenerated bit-exactly from its seed.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, downsample, project
from .dsp import AudioSignal, FeatureConfig, FeatureMatrix, logmel

UNK = "<unk>"

# Initialization scales. The first speech-encoder layer sees raw log-mel
# values (magnitudes up to ~5 across 40 dims), so it must be small enough to
# keep tanh units out of saturation. The projection starts near zero so that
# low-learning-rate training dominates the initial direction of e_s. Token
# embeddings carry a shared component several times the per-token spread:
# embedding spaces of large text retrievers are strongly anisotropic, and the
# shared direction is what a small speech branch can acquire quickly.
TOKEN_EMBED_STD = 1.0
TOKEN_EMBED_COMMON = 6.0
MIXER_STD = 0.0625
ENCODER_INPUT_STD = 0.3
PROJ_STD = 1e-3

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if UNK not in self.tokens:
            raise ValueError(f"vocab must contain {UNK!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        if not hasattr(self, "_index"):
            object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        return self._index

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @classmethod
    def from_words(cls, word_iter) -> "Vocab":
        uniq = sorted({w for w in word_iter if w != UNK})
        return cls(tokens=tuple(uniq) + (UNK,))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    index = vocab.index
    unk = vocab.unk_id
    return [index.get(w, unk) for w in words(text)]


@dataclass(frozen=True)
class MixerLayer:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class BackboneParams:
    token_embedding: np.ndarray
    layers: tuple[MixerLayer, ...]
    seed: int

    @property
    def hidden_dim(self) -> int:
        return self.token_embedding.shape[1]


@dataclass(frozen=True)
class SpeechEncoderParams:
    """Affine+tanh stack; the final layer is linear so the adapter input does
    not saturate."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]  # (weight, bias) pairs


def make_backbone(
    vocab_size: int,
    hidden_dim: int = 64,
    n_layers: int = 2,
    seed: int = 0,
    dtype=np.float32,
) -> BackboneParams:
    """Generate the frozen backbone bit-exactly from its seed.

    The draw order (token embedding, then per-layer w_in and w_out) is part
    of the checkpoint contract: checkpoints store only the seed and dims.
    """
    rng = np.random.default_rng([seed, 10])
    common = rng.normal(0.0, 1.0, hidden_dim)
    common *= TOKEN_EMBED_COMMON / np.linalg.norm(common)
    token_embedding = common + rng.normal(0.0, TOKEN_EMBED_STD, (vocab_size, hidden_dim))
    layers = []
    for _ in range(n_layers):
        w_in = rng.normal(0.0, MIXER_STD, (hidden_dim, hidden_dim))
        w_out = rng.normal(0.0, MIXER_STD, (hidden_dim, hidden_dim))
        layers.append(
            MixerLayer(
                w_in=w_in.astype(dtype),
                b_in=np.zeros(hidden_dim, dtype=dtype),
                w_out=w_out.astype(dtype),
                b_out=np.zeros(hidden_dim, dtype=dtype),
            )
        )
    return BackboneParams(
        token_embedding=token_embedding.astype(dtype), layers=tuple(layers), seed=seed
    )


def make_speech_encoder(
    n_mels: int = 40,
    encoder_dim: int = 64,
    n_layers: int = 2,
    seed: int = 0,
    dtype=np.float32,
) -> SpeechEncoderParams:
    rng = np.random.default_rng([seed, 11])
    dims = [n_mels] + [encoder_dim] * n_layers
    layers = []
    for k in range(n_layers):
        fan_in, fan_out = dims[k], dims[k + 1]
        std = ENCODER_INPUT_STD if k == 0 else 1.0 / np.sqrt(fan_in)
        w = rng.normal(0.0, std, (fan_in, fan_out))
        layers.append((w.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    return SpeechEncoderParams(layers=tuple(layers))


def backbone_checksum(params: BackboneParams) -> str:
    digest = hashlib.sha256()
    digest.update(str(params.seed).encode())
    digest.update(np.ascontiguousarray(params.token_embedding).tobytes())
    for layer in params.layers:
        for arr in (layer.w_in, layer.b_in, layer.w_out, layer.b_out):
            digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def backbone_forward(seq: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Apply the frozen residual mixer to a T x H sequence.

    Per layer: rowwise residual update x <- x + tanh(x W_in + b_in) W_out
    + b_out, then token mixing: the mean across the T rows is subtracted from
    each row as a residual update (x <- x + (x - rowmean)). The mixing
    contribution vanishes for a single row, so a T=1 sequence passes through
    the pure rowwise residual map, and the mixing commutes with mean pooling
    (it sharpens rows against their context without destroying the pooled
    content).
    """
    x = np.asarray(seq)
    if x.ndim != 2:
        raise ValueError(f"expected a T x H sequence, got shape {x.shape}")
    if x.shape[1] != params.hidden_dim:
        raise ValueError(
            f"sequence width {x.shape[1]} does not match backbone width {params.hidden_dim}"
        )
    for layer in params.layers:
        hidden = np.tanh(x @ layer.w_in + layer.b_in)
        x = x + hidden @ layer.w_out + layer.b_out
        x = x + (x - x.mean(axis=0, keepdims=True))
    return x


def pool(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError(f"cannot pool an empty or non-2-D sequence of shape {seq.shape}")
    return seq.mean(axis=0)


def embed_text(text: str, vocab: Vocab, backbone: BackboneParams) -> np.ndarray:
    ids = tokenize(text, vocab)
    if not ids:
        raise ValueError(f"text {text!r} is empty after tokenization")
    seq = backbone.token_embedding[ids]
    return pool(backbone_forward(seq, backbone))


def speech_encode(features, params: SpeechEncoderParams) -> np.ndarray:
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    if x.ndim != 2:
        raise ValueError(f"expected T x n_mels features, got shape {x.shape}")
    n_layers = len(params.layers)
    x = x.astype(params.layers[0][0].dtype, copy=False)
    for k, (w, b) in enumerate(params.layers):
        if x.shape[1] != w.shape[0]:
            raise ValueError(
                f"layer {k}: input width {x.shape[1]} does not match weight rows {w.shape[0]}"
            )
        x = x @ w + b
        if k < n_layers - 1:
            x = np.tanh(x)
    return x


def embed_speech(
    signal: AudioSignal,
    cfg: FeatureConfig,
    speech_params: SpeechEncoderParams,
    adapter_params: AdapterParams,
    backbone: BackboneParams,
) -> np.ndarray:
    feats = logmel(signal, cfg)
    encoded = speech_encode(feats, speech_params)
    pooled = downsample(encoded, adapter_params.downsample_factor)
    projected = project(pooled, adapter_params)
    return pool(backbone_forward(projected, backbone))


@dataclass(frozen=True)
class RetrieverModel:
    """Bundle of everything needed to embed either modality."""

    vocab: Vocab
    backbone: BackboneParams
    speech: SpeechEncoderParams
    adapter: AdapterParams
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    def embed_text(self, text: str) -> np.ndarray:
        return embed_text(text, self.vocab, self.backbone)

    def embed_speech(self, signal: AudioSignal) -> np.ndarray:
        return embed_speech(signal, self.feature_config, self.speech, self.adapter, self.backbone)
