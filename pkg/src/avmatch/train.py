"""Contrastive projection training.

A small MLP maps audio-feature vectors into the frozen image-embedding
space; training minimizes a softmax-over-batch contrastive loss between
projected audio and the (constant) image embeddings of the curated
pairs. After every epoch the category precision@k on the validation
pairs decides the best checkpoint.

All arithmetic runs in float64 for gradient fidelity; checkpoint files
carry float32 weights.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .curation import CuratedPair
from .errors import (
    BadCheckpoint,
    BadConfig,
    BadTemperature,
    BatchMismatch,
    DimMismatch,
    EmptyTrainingSet,
    IoFailure,
    TruncatedFile,
)
from .metrics import evaluate
from .store import AudioItem, EmbeddingStore, ItemMeta

ACTIVATIONS = ("relu", "gelu")
OPTIMIZERS = ("sgd", "adam")

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class Projector:
    """Multilayer map from feature space into the image-embedding space.

    weights[i] has shape (layer_dims[i], layer_dims[i+1]); the final
    layer is linear and its output is row-normalized to unit length.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Projector":
        return Projector(self.layer_dims, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


def init_projector(layer_dims: Sequence[int], activation: str = "relu",
                   seed: int = 0) -> Projector:
    """Seeded He-scaled Gaussian init with zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise BadConfig(f"layer_dims needs >= 2 positive entries, got {dims}")
    if activation not in ACTIVATIONS:
        raise BadConfig(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((d_in, d_out)) * math.sqrt(2.0 / d_in))
        biases.append(np.zeros(d_out))
    return Projector(dims, weights, biases, activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    return 0.5 * z * (1.0 + np.tanh(inner))


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * _GELU_C \
        * (1.0 + 3 * 0.044715 * z ** 2)


def _forward_cached(p: Projector, x: np.ndarray):
    """Forward pass keeping per-layer caches for backprop."""
    h = x.astype(np.float64)
    hs = [h]
    zs = []
    for li, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        zs.append(z)
        h = _act(z, p.activation) if li < len(p.weights) - 1 else z
        hs.append(h)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise BadConfig("projector produced a zero output vector")
    out = h / norms
    return out, hs, zs, norms


def forward(p: Projector, features) -> np.ndarray:
    """Unit-normalized projections of a batch of feature vectors."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != p.in_dim:
        raise DimMismatch(f"feature dim {x.shape[1]} vs projector {p.in_dim}")
    out, _, _, _ = _forward_cached(p, x)
    return out


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def info_nce(audio_embs, image_embs, temperature: float = 0.07,
             symmetric: bool = True) -> float:
    """Softmax-over-batch contrastive loss; diagonal pairs are positives.

    The symmetric variant averages the audio-to-image and
    image-to-audio directions.
    """
    loss, _ = info_nce_grad(audio_embs, image_embs, temperature, symmetric)
    return loss


def info_nce_grad(audio_embs, image_embs, temperature: float = 0.07,
                  symmetric: bool = True):
    """Loss plus its gradient with respect to the audio embeddings only;
    the image side is frozen and never receives a gradient."""
    if temperature <= 0:
        raise BadTemperature(f"temperature must be > 0, got {temperature}")
    a = np.atleast_2d(np.asarray(audio_embs, dtype=np.float64))
    v = np.atleast_2d(np.asarray(image_embs, dtype=np.float64))
    if a.shape[0] != v.shape[0]:
        raise BatchMismatch(f"batch {a.shape[0]} vs {v.shape[0]}")
    if a.shape[1] != v.shape[1]:
        raise DimMismatch(f"dim {a.shape[1]} vs {v.shape[1]}")
    b = a.shape[0]
    if b == 0:
        raise BatchMismatch("empty batch")

    logits = (a @ v.T) / temperature
    diag = np.diag(logits)
    loss_rows = float(np.mean(_logsumexp(logits, axis=1) - diag))
    eye = np.eye(b)
    grad_logits = (_softmax(logits, axis=1) - eye) / b
    if symmetric:
        loss_cols = float(np.mean(_logsumexp(logits, axis=0) - diag))
        grad_logits = (grad_logits + (_softmax(logits, axis=0) - eye) / b) / 2.0
        loss = (loss_rows + loss_cols) / 2.0
    else:
        loss = loss_rows
    grad_audio = (grad_logits @ v) / temperature
    return max(loss, 0.0), grad_audio


def _backward(p: Projector, hs, zs, norms, grad_out):
    """Gradients of the loss w.r.t. every weight and bias.

    grad_out is d loss / d (normalized output).
    """
    out = hs[-1] / norms
    # through row normalization: g_z = (g - (g . e) e) / ||z||
    delta = (grad_out - np.sum(grad_out * out, axis=1, keepdims=True) * out) \
        / norms
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.biases)
    for li in range(len(p.weights) - 1, -1, -1):
        grads_w[li] = hs[li].T @ delta
        grads_b[li] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ p.weights[li].T) * _act_grad(zs[li - 1],
                                                          p.activation)
    return grads_w, grads_b


def loss_and_grads(p: Projector, features: np.ndarray, image_embs: np.ndarray,
                   temperature: float, symmetric: bool):
    """End-to-end loss and parameter gradients for one batch."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    out, hs, zs, norms = _forward_cached(p, x)
    loss, grad_audio = info_nce_grad(out, image_embs, temperature, symmetric)
    grads_w, grads_b = _backward(p, hs, zs, norms, grad_audio)
    return loss, grads_w, grads_b


def grad_check(p: Projector, batch, temperature: float = 0.07,
               eps: float = 1e-4, symmetric: bool = True,
               max_coords: int = 64, seed: int = 0) -> float:
    """Max relative error of analytic vs central finite-difference
    gradients over a seeded sample of weight coordinates."""
    if not (1e-6 <= eps <= 1e-3):
        raise BadConfig(f"eps must be in [1e-6, 1e-3], got {eps}")
    features, image_embs = batch
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_2d(np.asarray(image_embs, dtype=np.float64))
    _, grads_w, grads_b = loss_and_grads(p, x, y, temperature, symmetric)

    coords = []
    for li, w in enumerate(p.weights):
        coords.extend(("w", li, idx) for idx in range(w.size))
        coords.extend(("b", li, idx) for idx in range(p.biases[li].size))
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    def loss_at() -> float:
        out, _, _, _ = _forward_cached(p, x)
        loss, _ = info_nce_grad(out, y, temperature, symmetric)
        return loss

    worst = 0.0
    for kind, li, idx in coords:
        arr = p.weights[li] if kind == "w" else p.biases[li]
        flat = arr.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        up = loss_at()
        flat[idx] = orig - eps
        down = loss_at()
        flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = (grads_w if kind == "w" else grads_b)[li].reshape(-1)[idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    max_epochs: int = 150
    temperature: float = 0.07
    seed: int = 0
    symmetric_loss: bool = True
    optimizer: str = "adam"
    hidden_dims: tuple[int, ...] = (512,)
    activation: str = "relu"
    eval_k: int = 10

    def __post_init__(self):
        if self.temperature <= 0:
            raise BadTemperature(f"temperature must be > 0, got "
                                 f"{self.temperature}")
        if self.batch_size < 2:
            raise BadConfig(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise BadConfig(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise BadConfig(f"unknown optimizer {self.optimizer!r}")
        if self.activation not in ACTIVATIONS:
            raise BadConfig(f"unknown activation {self.activation!r}")


@dataclass
class Checkpoint:
    epoch: int
    projector: Projector
    val_category_p10: float
    seed: int = 0


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _Sgd:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


def _categories_of(store: EmbeddingStore) -> dict[str, str]:
    return {item_id: store.meta[item_id].category for item_id in store.ids}


def fit(pairs: Sequence[CuratedPair], audio_store: EmbeddingStore,
        image_store: EmbeddingStore, cfg: TrainConfig,
        val_pairs: Sequence[CuratedPair], log_path: str | None = None,
        init_from: Projector | None = None) -> Checkpoint:
    """Train the projector on curated pairs; return the best checkpoint.

    Best = highest validation category precision@k, earliest epoch on
    ties. Shuffling is reseeded deterministically every epoch; the image
    store is read-only throughout. `init_from` warm-starts from existing
    weights instead of a fresh seeded init.
    """
    if not pairs:
        raise EmptyTrainingSet("no training pairs")
    if not val_pairs:
        raise BadConfig("validation pairs required for checkpoint selection")
    train_audio = {p.audio_id for p in pairs}
    val_audio = {p.audio_id for p in val_pairs}
    if train_audio & val_audio:
        raise BadConfig("train and val pairs share audio items")
    if {p.frame_id for p in pairs} & {p.frame_id for p in val_pairs}:
        raise BadConfig("train and val pairs share frames")

    for p in pairs:
        if p.audio_id not in audio_store:
            raise DimMismatch(f"pair audio {p.audio_id!r} not in audio store")
        if p.frame_id not in image_store:
            raise DimMismatch(f"pair frame {p.frame_id!r} not in image store")

    dims = (audio_store.dim, *cfg.hidden_dims, image_store.dim)
    if init_from is not None:
        if init_from.in_dim != audio_store.dim or \
                init_from.out_dim != image_store.dim:
            raise DimMismatch("init_from projector dims do not match stores")
        projector = init_from.copy()
    else:
        projector = init_projector(dims, cfg.activation, cfg.seed)

    features = np.vstack([audio_store.vector(p.audio_id) for p in pairs]) \
        .astype(np.float64)
    targets = np.vstack([image_store.vector(p.frame_id) for p in pairs]) \
        .astype(np.float64)
    image_before = image_store.matrix.copy()

    params = projector.weights + projector.biases
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" \
        else _Sgd(params, cfg.learning_rate)

    val_ids = sorted(val_audio)
    categories = _categories_of(audio_store)
    rng = np.random.default_rng(cfg.seed)
    best: Checkpoint | None = None
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            perm = rng.permutation(len(pairs))
            losses = []
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                loss, gw, gb = loss_and_grads(
                    projector, features[idx], targets[idx],
                    cfg.temperature, cfg.symmetric_loss)
                opt.step(params, gw + gb)
                losses.append(loss)
            train_loss = float(np.mean(losses)) if losses else 0.0

            projected = project_all(projector, audio_store.subset(val_ids))
            report = evaluate(projected, val_pairs, image_store, categories,
                              k=cfg.eval_k, dataset_name="val")
            val_p10 = report.category_p_at_k
            if best is None or val_p10 > best.val_category_p10:
                best = Checkpoint(epoch, projector.copy(), val_p10, cfg.seed)
            if log_f:
                log_f.write(json.dumps({"epoch": epoch,
                                        "train_loss": train_loss,
                                        "val_p10": val_p10}) + "\n")
    finally:
        if log_f:
            log_f.close()

    if not np.array_equal(image_before, image_store.matrix):
        raise BadConfig("image store mutated during training")
    assert best is not None
    return best


def project_all(p: Projector, audio) -> EmbeddingStore:
    """Project every audio item; result is a unit-vector store in the
    image-embedding space keyed by the same ids."""
    if isinstance(audio, EmbeddingStore):
        ids = list(audio.ids)
        feats = audio.matrix
        metas = [audio.meta[i] for i in ids]
    else:
        items: list[AudioItem] = list(audio)
        ids = [a.id for a in items]
        feats = np.vstack([a.feature for a in items]) if items \
            else np.empty((0, p.in_dim), dtype=np.float32)
        metas = [a.meta() for a in items]
    if feats.shape[0] and feats.shape[1] != p.in_dim:
        raise DimMismatch(f"feature dim {feats.shape[1]} vs projector "
                          f"{p.in_dim}")
    out = forward(p, feats) if len(ids) else \
        np.empty((0, p.out_dim), dtype=np.float64)
    entries = [(item_id, out[i].astype(np.float32), metas[i])
               for i, item_id in enumerate(ids)]
    return EmbeddingStore.build(p.out_dim, entries, normalize=False)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """One JSON header line, then the float32 little-endian weight
    payload (per layer: W row-major, then bias)."""
    header = {"layer_dims": list(ckpt.projector.layer_dims),
              "activation": ckpt.projector.activation,
              "epoch": ckpt.epoch,
              "val_category_p10": ckpt.val_category_p10,
              "seed": ckpt.seed}
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            for w, b in zip(ckpt.projector.weights, ckpt.projector.biases):
                f.write(w.astype("<f4").tobytes())
                f.write(b.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint from {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
        dims = tuple(int(d) for d in header["layer_dims"])
        activation = header["activation"]
        epoch = int(header["epoch"])
        val_p10 = float(header["val_category_p10"])
        seed = int(header.get("seed", 0))
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise BadCheckpoint(f"{path}: malformed header: {exc}") from exc
    if activation not in ACTIVATIONS or len(dims) < 2:
        raise BadCheckpoint(f"{path}: invalid header values")

    expected = sum(d_in * d_out + d_out
                   for d_in, d_out in zip(dims[:-1], dims[1:])) * 4
    if len(payload) != expected:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, "
                            f"expected {expected}")
    weights = []
    biases = []
    offset = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        n = d_in * d_out * 4
        weights.append(np.frombuffer(payload, dtype="<f4", count=d_in * d_out,
                                     offset=offset)
                       .reshape(d_in, d_out).astype(np.float64))
        offset += n
        biases.append(np.frombuffer(payload, dtype="<f4", count=d_out,
                                    offset=offset).astype(np.float64))
        offset += d_out * 4
    projector = Projector(dims, weights, biases, activation)
    return Checkpoint(epoch, projector, val_p10, seed)
