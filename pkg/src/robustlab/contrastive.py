"""Contrastive pretraining: NT-Xent loss, stochastic augmentation, and a
small pretraining loop whose encoder transfers into the classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .defenses import AdamState, adam_step
from .errors import ConfigurationError, ContractViolation
from .imageops import bilinear_resize
from .nn import LayerSpec, Model, build_model, dense_forward, forward
from .tensor import (Tensor, add, backward, div, exp, l2_normalize, log, matmul, mean_,
                     mul, neg, relu, sub, sum_, take_flat, transpose)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    noise_sigma: float = 0.02

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, "
                                     f"got {self.crop_scale}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigurationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.brightness < 0 or self.contrast < 0 or self.noise_sigma < 0:
            raise ConfigurationError("jitter ranges must be non-negative")


IDENTITY_AUGMENT = AugmentConfig(crop_scale=(1.0, 1.0), flip_prob=0.0,
                                 brightness=0.0, contrast=0.0, noise_sigma=0.0)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop-resize, flip, intensity jitter, and noise; output in [0, 1].

    Deterministic given the generator's state; every call consumes the same
    number of draws regardless of configured ranges.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape

    scale = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
    side_h = max(1, int(round(scale * h)))
    side_w = max(1, int(round(scale * w)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    out = img[:, top:top + side_h, left:left + side_w]
    out = bilinear_resize(out, h, w)

    if rng.uniform() < cfg.flip_prob:
        out = out[:, :, ::-1]

    shift = rng.uniform(-cfg.brightness, cfg.brightness)
    gain = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    mean = out.mean()
    # arranged so gain == 1 and shift == 0 is a bitwise no-op
    out = out * gain + (mean * (1.0 - gain) + shift)
    out = out + rng.normal(0.0, 1.0, size=out.shape) * cfg.noise_sigma
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# NT-Xent
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingBatch:
    """2N embeddings with a perfect-matching pairing map and a temperature."""
    embeddings: Tensor
    pairing: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        self.pairing = np.asarray(self.pairing, dtype=np.int64)
        m = self.embeddings.shape[0]
        if m < 4 or m % 2 != 0:
            raise ConfigurationError(f"need 2N >= 4 embeddings, got {m}")
        if self.pairing.shape != (m,):
            raise ConfigurationError(f"pairing must have shape ({m},)")
        if np.any(self.pairing == np.arange(m)) or \
                np.any(self.pairing[self.pairing] != np.arange(m)):
            raise ConfigurationError("pairing must be a perfect matching without "
                                     "fixed points")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.tau}")


def adjacent_pairing(two_n: int) -> np.ndarray:
    """Pairing (0,1), (2,3), ... for view-interleaved batches."""
    p = np.arange(two_n)
    p[0::2] += 1
    p[1::2] -= 1
    return p


def scaled_similarities(embeddings: Tensor, tau: float) -> Tensor:
    """Cosine-similarity matrix divided by the temperature (the loss logits)."""
    if np.any(np.linalg.norm(embeddings.data, axis=1) == 0):
        raise ContractViolation("NT-Xent is undefined for zero-norm embeddings")
    z = l2_normalize(embeddings, axis=1)
    return div(matmul(z, transpose(z)), float(tau))


def nt_xent(batch: EmbeddingBatch) -> Tensor:
    """Mean over all 2N ordered positive pairs of
    -log softmax-over-non-self(sim/tau)[positive partner]."""
    m = batch.embeddings.shape[0]
    logits = scaled_similarities(batch.embeddings, batch.tau)
    # exclude self-similarity from each row's normalizer
    self_mask = Tensor(np.eye(m, dtype=batch.embeddings.dtype) * 1e9)
    masked = sub(logits, self_mask)
    row_max = Tensor(np.max(masked.data, axis=1, keepdims=True))
    shifted = sub(masked, row_max)
    lse = add(log(sum_(exp(shifted), axis=1, keepdims=True)), row_max)
    pos = take_flat(logits, np.arange(m) * m + batch.pairing, (m,))
    per_row = sub(lse.reshape(m), pos)
    return mean_(per_row)


# ---------------------------------------------------------------------------
# pretraining and transfer
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 300
    batch_n: int = 8          # N images per step -> 2N views
    tau: float = 0.5
    learning_rate: float = 1e-3
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_n < 2:
            raise ConfigurationError(
                f"contrastive batches need N >= 2 (no negatives otherwise), "
                f"got {self.batch_n}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")


def _projection_head(width: int, seed: int, dtype) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    scale = np.sqrt(2.0 / width)
    return {
        "proj1.weight": Tensor((rng.standard_normal((width, width)) * scale).astype(dtype),
                               requires_grad=True),
        "proj1.bias": Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
        "proj2.weight": Tensor((rng.standard_normal((width, width)) * scale).astype(dtype),
                               requires_grad=True),
        "proj2.bias": Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
    }


def _project(features: Tensor, head: dict[str, Tensor]) -> Tensor:
    hidden = relu(dense_forward(features, head["proj1.weight"], head["proj1.bias"]))
    return dense_forward(hidden, head["proj2.weight"], head["proj2.bias"])


def pretrain(encoder: Model, images: np.ndarray, cfg: PretrainConfig):
    """Minimize NT-Xent over two augmented views per sampled image.

    The two-layer projection head is trained jointly and discarded; returns
    (encoder, per-step loss list).
    """
    if len(images) == 0:
        raise ConfigurationError("cannot pretrain on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    width = _encoder_width(encoder)
    head = _projection_head(width, seed=cfg.seed + 1, dtype=encoder.dtype)
    params = dict(encoder.parameters())
    params.update(head)
    state = AdamState()
    losses: list[float] = []

    for _ in range(cfg.steps):
        picks = rng.choice(len(images), size=cfg.batch_n, replace=False) \
            if len(images) >= cfg.batch_n else rng.choice(len(images), size=cfg.batch_n)
        views = []
        for i in picks:
            views.append(augment(images[i], cfg.augment, rng))
            views.append(augment(images[i], cfg.augment, rng))
        batch = Tensor(np.stack(views).astype(encoder.dtype))
        feats = forward(encoder, batch)
        emb = _project(feats, head)
        loss = nt_xent(EmbeddingBatch(emb, adjacent_pairing(2 * cfg.batch_n), cfg.tau))
        losses.append(loss.item())
        grad_map = backward(loss, wrt=list(params.values()))
        grads = {name: grad_map[params[name]].data for name in params}
        adam_step(params, grads, state, lr=cfg.learning_rate)
        for p in params.values():
            p.grad = None
    encoder.metadata["provenance"] = "pretrained: contrastive"
    return encoder, losses


def _encoder_width(encoder: Model) -> int:
    if encoder.layers[-1].kind != "globalavgpool":
        raise ConfigurationError("encoder must end at the global average pool")
    shape = encoder.input_shape
    from .nn import _walk_shapes  # shape walk is the authority on widths
    return _walk_shapes(encoder.layers, shape)[-1][3][0]


def transfer(encoder: Model, classifier_spec: Sequence[LayerSpec], seed: int,
             input_shape: Optional[tuple] = None, dtype=None) -> Model:
    """Classifier whose backbone parameters are copied from the encoder and
    whose head is freshly initialized."""
    classifier_spec = list(classifier_spec)
    if classifier_spec[:len(encoder.layers)] != encoder.layers:
        raise ConfigurationError("classifier spec does not extend the encoder's "
                                 "layer stack")
    model = build_model(classifier_spec, seed=seed,
                        input_shape=input_shape or encoder.input_shape,
                        dtype=dtype or encoder.dtype)
    for name, tensor in encoder.parameters().items():
        if name not in model.params:
            raise ConfigurationError(f"encoder parameter {name} has no slot in "
                                     f"the classifier")
        if model.params[name].shape != tensor.shape:
            raise ConfigurationError(f"shape mismatch for {name}: encoder "
                                     f"{tensor.shape} vs classifier "
                                     f"{model.params[name].shape}")
        model.params[name] = Tensor(tensor.data.astype(model.dtype).copy(),
                                    requires_grad=True)
    model.metadata["provenance"] = encoder.metadata.get("provenance", "transfer")
    return model
