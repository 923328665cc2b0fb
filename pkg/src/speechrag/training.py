"""Distillation training of the speech branch against frozen text targets.

The objective is the cosine embedding loss 1 - cos(e_s, e_t), averaged over a
batch of (audio passage, ground-truth transcript) pairs. Gradients are exact
reverse-mode derivatives through pool -> backbone -> project -> downsample ->
speech encoder, hand-written against the fixed computation graph (feature
extraction has no parameters and is not differentiated). The backbone and
token embeddings receive no gradient and are never mutated.

Training runs in single precision by default; gradient checking builds the
same graph in double precision and compares against central differences.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import AdapterParams, downsample
from .corpus import Corpus
from .dsp import FeatureConfig, logmel
from .encoder import (
    BackboneParams,
    RetrieverModel,
    SpeechEncoderParams,
    Vocab,
    embed_text,
    make_backbone,
    make_speech_encoder,
)

NORM_GUARD = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    grad_accum_steps: int = 16
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        for name in ("batch_size", "grad_accum_steps", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# Trainable-tensor plumbing: gradients, Adam state, and checkpoints all key
# tensors by name ("encoder/<k>/w", "encoder/<k>/b", "adapter/w_proj",
# "adapter/b_proj").
# ---------------------------------------------------------------------------


def trainable_tensors(
    speech: SpeechEncoderParams, adapter: AdapterParams
) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for k, (w, b) in enumerate(speech.layers):
        tensors[f"encoder/{k}/w"] = w
        tensors[f"encoder/{k}/b"] = b
    tensors["adapter/w_proj"] = adapter.w_proj
    tensors["adapter/b_proj"] = adapter.b_proj
    return tensors


def params_from_tensors(
    tensors: dict[str, np.ndarray], n_encoder_layers: int, downsample_factor: int
) -> tuple[SpeechEncoderParams, AdapterParams]:
    layers = tuple(
        (tensors[f"encoder/{k}/w"], tensors[f"encoder/{k}/b"])
        for k in range(n_encoder_layers)
    )
    adapter = AdapterParams(
        w_proj=tensors["adapter/w_proj"],
        b_proj=tensors["adapter/b_proj"],
        downsample_factor=downsample_factor,
    )
    return SpeechEncoderParams(layers=layers), adapter


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(arr) for k, arr in tensors.items()},
            v={k: np.zeros_like(arr) for k, arr in tensors.items()},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Standard Adam with bias correction; tensors are updated elementwise
    and independently of one another."""
    state.t += 1
    t = state.t
    updated: dict[str, np.ndarray] = {}
    for name, theta in tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        state.m[name] = config.beta1 * state.m[name] + (1 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1 - config.beta2) * g * g
        m_hat = state.m[name] / (1 - config.beta1**t)
        v_hat = state.v[name] / (1 - config.beta2**t)
        updated[name] = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return updated, state


# ---------------------------------------------------------------------------
# Loss and exact gradients
# ---------------------------------------------------------------------------


def cosine_loss(e_s: np.ndarray, e_t: np.ndarray) -> float:
    """1 - cos(e_s, e_t); norms are guarded with 1e-12 so silence-only
    embeddings cannot produce NaN. Value lies in [0, 2]."""
    e_s = np.asarray(e_s, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64)
    ns = math.sqrt(float(e_s @ e_s)) + NORM_GUARD
    nt = math.sqrt(float(e_t @ e_t)) + NORM_GUARD
    return 1.0 - float(e_s @ e_t) / (ns * nt)


def _cosine_loss_grad(e_s: np.ndarray, e_t: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and dL/de_s, differentiating the guarded expression exactly."""
    r = math.sqrt(float(e_s @ e_s))
    rt = math.sqrt(float(e_t @ e_t))
    ns, nt = r + NORM_GUARD, rt + NORM_GUARD
    cos = float(e_s @ e_t) / (ns * nt)
    if r > 0.0:
        grad = -(e_t / (ns * nt) - (cos / ns) * (e_s / r))
    else:
        grad = -e_t / (ns * nt)
    return 1.0 - cos, grad


def _forward_item(features: np.ndarray, speech, adapter, backbone) -> tuple[np.ndarray, dict]:
    """Forward pass keeping every intermediate the backward pass needs."""
    cache: dict = {"enc_inputs": [], "enc_acts": []}
    x = features
    n_layers = len(speech.layers)
    for k, (w, b) in enumerate(speech.layers):
        cache["enc_inputs"].append(x)
        z = x @ w + b
        x = np.tanh(z) if k < n_layers - 1 else z
        cache["enc_acts"].append(x)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activations after encoder layer {k}")
    cache["enc_out_rows"] = x.shape[0]
    down = downsample(x, adapter.downsample_factor)
    cache["down"] = down
    proj = down @ adapter.w_proj + adapter.b_proj
    if not np.all(np.isfinite(proj)):
        raise FloatingPointError("non-finite activations after adapter projection")
    cache["bb_inputs"] = []
    cache["bb_tanh"] = []
    y = proj
    n_rows = y.shape[0]
    for i, layer in enumerate(backbone.layers):
        cache["bb_inputs"].append(y)
        t = np.tanh(y @ layer.w_in + layer.b_in)
        cache["bb_tanh"].append(t)
        y = y + t @ layer.w_out + layer.b_out
        y = y + (y - y.mean(axis=0, keepdims=True))
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite activations after backbone layer {i}")
    cache["bb_rows"] = n_rows
    return y.mean(axis=0), cache


def _backward_item(
    grad_e: np.ndarray, cache: dict, speech, adapter, backbone
) -> dict[str, np.ndarray]:
    n_rows = cache["bb_rows"]
    g = np.broadcast_to(grad_e / n_rows, (n_rows, grad_e.size)).copy()
    for i in reversed(range(len(backbone.layers))):
        layer = backbone.layers[i]
        # The mixing map is self-adjoint, so its backward pass reuses it.
        g = g + (g - g.mean(axis=0, keepdims=True))
        t = cache["bb_tanh"][i]
        g_t = g @ layer.w_out.T
        g_u = g_t * (1.0 - t * t)
        g = g + g_u @ layer.w_in.T

    down = cache["down"]
    grads: dict[str, np.ndarray] = {
        "adapter/w_proj": down.T @ g,
        "adapter/b_proj": g.sum(axis=0),
    }
    g = g @ adapter.w_proj.T

    factor = adapter.downsample_factor
    enc_rows = cache["enc_out_rows"]
    starts = np.arange(0, enc_rows, factor)
    counts = np.minimum(starts + factor, enc_rows) - starts
    g = np.repeat(g / counts[:, None].astype(g.dtype), counts, axis=0)

    n_layers = len(speech.layers)
    for k in reversed(range(n_layers)):
        w, _ = speech.layers[k]
        act = cache["enc_acts"][k]
        g_z = g * (1.0 - act * act) if k < n_layers - 1 else g
        grads[f"encoder/{k}/w"] = cache["enc_inputs"][k].T @ g_z
        grads[f"encoder/{k}/b"] = g_z.sum(axis=0)
        g = g_z @ w.T
    return grads


def loss_and_grads(
    items: list[tuple[np.ndarray, np.ndarray]],
    speech: SpeechEncoderParams,
    adapter: AdapterParams,
    backbone: BackboneParams,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cosine loss and its exact gradients over (features, target) items."""
    if not items:
        raise ValueError("empty batch")
    total_loss = 0.0
    acc: dict[str, np.ndarray] | None = None
    for features, target in items:
        e_s, cache = _forward_item(features, speech, adapter, backbone)
        loss, grad_e = _cosine_loss_grad(e_s, target)
        total_loss += loss
        grads = _backward_item(grad_e, cache, speech, adapter, backbone)
        if acc is None:
            acc = grads
        else:
            for name, g in grads.items():
                acc[name] += g
    assert acc is not None
    scale = 1.0 / len(items)
    return total_loss * scale, {name: g * scale for name, g in acc.items()}


def backward(
    batch: list[tuple], model: RetrieverModel
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-loss gradients for a batch of (AudioSignal, transcript) pairs.

    Targets e_t are computed with the frozen backbone; no gradient flows into
    the backbone or the token embeddings.
    """
    dtype = model.adapter.w_proj.dtype
    items = []
    for signal, transcript in batch:
        feats = logmel(signal, model.feature_config).data.astype(dtype)
        target = embed_text(transcript, model.vocab, model.backbone).astype(dtype)
        items.append((feats, target))
    return loss_and_grads(items, model.speech, model.adapter, model.backbone)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopper:
    """Stop when the tracked loss fails to improve for `patience` consecutive
    updates; remembers which update was best."""

    patience: int
    best: float = math.inf
    best_epoch: int = 0
    streak: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.streak = 0
        else:
            self.streak += 1
        return self.streak >= self.patience


@dataclass(frozen=True)
class Checkpoint:
    model: RetrieverModel
    train_config: TrainConfig
    best_val_loss: float
    epoch: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def _corpus_items(
    corpus: Corpus, model: RetrieverModel, dtype
) -> list[tuple[np.ndarray, np.ndarray]]:
    items = []
    for p in corpus.passages:
        signal = corpus.load_audio(p)
        feats = logmel(signal, model.feature_config).data.astype(dtype)
        target = embed_text(p.transcript, model.vocab, model.backbone).astype(dtype)
        items.append((feats, target))
    return items


def build_model(
    vocab: Vocab,
    hidden_dim: int = 64,
    encoder_dim: int = 64,
    encoder_layers: int = 2,
    backbone_layers: int = 2,
    downsample_factor: int = 4,
    feature_config: FeatureConfig | None = None,
    seed: int = 0,
    dtype=np.float32,
    proj_std: float | None = None,
) -> RetrieverModel:
    """Assemble a fresh model. `proj_std` overrides the near-zero training
    default; gradient checking uses a healthy scale there so finite
    differences probe a locally smooth loss."""
    from .adapter import make_adapter

    cfg = feature_config or FeatureConfig()
    return RetrieverModel(
        vocab=vocab,
        backbone=make_backbone(vocab.size, hidden_dim, backbone_layers, seed, dtype),
        speech=make_speech_encoder(cfg.n_mels, encoder_dim, encoder_layers, seed, dtype),
        adapter=make_adapter(encoder_dim, hidden_dim, downsample_factor, seed, dtype, proj_std),
        feature_config=cfg,
    )


def train(
    train_corpus: Corpus,
    val_corpus: Corpus,
    config: TrainConfig,
    model: RetrieverModel | None = None,
    vocab: Vocab | None = None,
    log_path=None,
    **model_kwargs,
) -> TrainResult:
    """Run the distillation recipe: seeded-shuffled micro-batches, gradients
    averaged over grad_accum_steps micro-batches per optimizer step (a
    trailing shorter accumulation window at the epoch end is averaged over
    its actual length), epoch-level validation, early stopping on val loss
    with the configured patience, best checkpoint retained.
    """
    if not train_corpus.passages or not val_corpus.passages:
        raise ValueError("train and val corpora must be non-empty")
    if model is None:
        if vocab is None:
            from .corpus import corpus_words

            vocab = Vocab.from_words(
                corpus_words(train_corpus) + corpus_words(val_corpus)
            )
        model = build_model(vocab, seed=config.seed, **model_kwargs)

    dtype = model.adapter.w_proj.dtype
    train_items = _corpus_items(train_corpus, model, dtype)
    val_items = _corpus_items(val_corpus, model, dtype)

    tensors = dict(trainable_tensors(model.speech, model.adapter))
    n_enc = len(model.speech.layers)
    factor = model.adapter.downsample_factor
    state = AdamState.init(tensors)
    stopper = EarlyStopper(patience=config.patience)
    best_tensors = {k: v.copy() for k, v in tensors.items()}
    rng = np.random.default_rng([config.seed, 20])
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    started = time.monotonic()
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(train_items))
            speech, adapter = params_from_tensors(tensors, n_enc, factor)
            acc_grads: dict[str, np.ndarray] | None = None
            acc_count = 0
            epoch_loss = 0.0
            n_seen = 0
            for start in range(0, len(order), config.batch_size):
                batch_idx = order[start : start + config.batch_size]
                batch = [train_items[i] for i in batch_idx]
                try:
                    loss, grads = loss_and_grads(batch, speech, adapter, model.backbone)
                except FloatingPointError as exc:
                    raise FloatingPointError(
                        f"epoch {epoch}, micro-batch at item {start}: {exc}"
                    ) from exc
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, micro-batch at item {start}"
                    )
                epoch_loss += loss * len(batch)
                n_seen += len(batch)
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for name, g in grads.items():
                        acc_grads[name] += g
                acc_count += 1
                is_last = start + config.batch_size >= len(order)
                if acc_count == config.grad_accum_steps or is_last:
                    mean_grads = {name: g / acc_count for name, g in acc_grads.items()}
                    tensors, state = adam_step(tensors, mean_grads, state, config)
                    speech, adapter = params_from_tensors(tensors, n_enc, factor)
                    acc_grads = None
                    acc_count = 0

            val_loss = evaluate_loss(val_items, speech, adapter, model.backbone)
            row = {
                "epoch": epoch,
                "train_loss": epoch_loss / n_seen,
                "val_loss": val_loss,
                "elapsed_s": time.monotonic() - started,
            }
            history.append(row)
            if log_fh:
                import json

                log_fh.write(json.dumps(row) + "\n")
            improved = val_loss < stopper.best
            should_stop = stopper.update(epoch, val_loss)
            if improved:
                best_tensors = {k: v.copy() for k, v in tensors.items()}
            if should_stop:
                break
    finally:
        if log_fh:
            log_fh.close()

    best_speech, best_adapter = params_from_tensors(best_tensors, n_enc, factor)
    best_model = replace(model, speech=best_speech, adapter=best_adapter)
    checkpoint = Checkpoint(
        model=best_model,
        train_config=config,
        best_val_loss=stopper.best,
        epoch=stopper.best_epoch,
    )
    return TrainResult(checkpoint=checkpoint, history=history)


def evaluate_loss(items, speech, adapter, backbone) -> float:
    total = 0.0
    for features, target in items:
        e_s, _ = _forward_item(features, speech, adapter, backbone)
        total += cosine_loss(e_s, target)
    return total / len(items)


def mean_cosine(corpus: Corpus, model: RetrieverModel) -> float:
    """Mean cos(e_s, e_t) over a corpus; the training-progress measure."""
    total = 0.0
    for p in corpus.passages:
        e_s = model.embed_speech(corpus.load_audio(p))
        e_t = model.embed_text(p.transcript)
        total += 1.0 - cosine_loss(e_s, e_t)
    return total / len(corpus.passages)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def to_dtype(model: RetrieverModel, dtype) -> RetrieverModel:
    backbone = BackboneParams(
        token_embedding=model.backbone.token_embedding.astype(dtype),
        layers=tuple(
            type(layer)(
                w_in=layer.w_in.astype(dtype),
                b_in=layer.b_in.astype(dtype),
                w_out=layer.w_out.astype(dtype),
                b_out=layer.b_out.astype(dtype),
            )
            for layer in model.backbone.layers
        ),
        seed=model.backbone.seed,
    )
    speech = SpeechEncoderParams(
        layers=tuple((w.astype(dtype), b.astype(dtype)) for w, b in model.speech.layers)
    )
    adapter = AdapterParams(
        w_proj=model.adapter.w_proj.astype(dtype),
        b_proj=model.adapter.b_proj.astype(dtype),
        downsample_factor=model.adapter.downsample_factor,
    )
    return replace(model, backbone=backbone, speech=speech, adapter=adapter)


def grad_check(
    model: RetrieverModel,
    items: list[tuple[np.ndarray, np.ndarray]],
    probe_count: int = 5,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences on
    `probe_count` randomly chosen scalar parameters per trainable tensor.
    Returns the maximum relative error. Use a double-precision model."""
    model = to_dtype(model, np.float64)
    items = [(f.astype(np.float64), t.astype(np.float64)) for f, t in items]
    tensors = dict(trainable_tensors(model.speech, model.adapter))
    n_enc = len(model.speech.layers)
    factor = model.adapter.downsample_factor
    speech, adapter = params_from_tensors(tensors, n_enc, factor)
    _, analytic = loss_and_grads(items, speech, adapter, model.backbone)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, theta in tensors.items():
        flat = theta.reshape(-1)
        n_probe = min(probe_count, flat.size)
        for idx in rng.choice(flat.size, size=n_probe, replace=False):
            original = flat[idx]
            flat[idx] = original + eps
            lo_speech, lo_adapter = params_from_tensors(tensors, n_enc, factor)
            loss_plus, _ = loss_and_grads(items, lo_speech, lo_adapter, model.backbone)
            flat[idx] = original - eps
            lo_speech, lo_adapter = params_from_tensors(tensors, n_enc, factor)
            loss_minus, _ = loss_and_grads(items, lo_speech, lo_adapter, model.backbone)
            flat[idx] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[idx])
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
            worst = max(worst, err)
    return worst
