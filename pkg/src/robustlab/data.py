"""Synthetic dataset generation, image-folder ingestion, stratified k-fold
splitting, F1/sensitivity metrics, attack evaluation, and residual maps.

Class 0 renders smooth elliptic blobs, class 1 the same blobs with a
spiculated (radially perturbed) boundary; both sit on textured noisy
backgrounds so the decision relies on fine structure. The positive class
for all metrics is 1 (malignant-like).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, run_attack
from .errors import ConfigurationError, IngestError
from .imageops import bilinear_resize, pad_to_square
from .nn import Model, forward
from .tensor import Tensor, no_grad

LABEL_NAMES = {"benign": 0, "malignant": 1}


@dataclass
class Dataset:
    images: np.ndarray           # (M, C, H, W) in [0, 1]
    labels: np.ndarray           # (M,) ints in {0, 1}
    ids: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ConfigurationError("images, labels, and ids must align")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("sample ids must be unique")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices],
                       [self.ids[i] for i in indices], dict(self.provenance))

    def index_of(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise ConfigurationError(f"unknown sample id {sample_id!r}") from None


@dataclass(frozen=True)
class SyntheticParams:
    radius_range: tuple[float, float] = (0.18, 0.30)   # fraction of image side
    spike_amplitude: tuple[float, float] = (0.2, 0.65)  # per-sample draw
    spike_frequencies: tuple[int, ...] = (7, 11, 13)
    blob_contrast: tuple[float, float] = (0.28, 0.45)
    background_level: tuple[float, float] = (0.25, 0.45)
    texture_strength: float = 0.05
    noise_sigma: float = 0.035
    edge_softness: float = 0.7                          # pixels
    # fine interior grain on the malignant class: strong in aggregate but,
    # per pixel, smaller than a 5/255 attack budget, i.e. a non-robust cue
    grain_amplitude: float = 0.014


def _render_blob(size: int, rng: np.random.Generator, params: SyntheticParams,
                 spiculated: bool) -> np.ndarray:
    cx, cy = rng.uniform(0.38, 0.62, size=2) * size
    lo, hi = params.radius_range
    ra, rb = rng.uniform(lo, hi, size=2) * size
    phi = rng.uniform(0, np.pi)

    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    cos_p, sin_p = np.cos(phi), np.sin(phi)
    u = dx * cos_p + dy * sin_p
    v = -dx * sin_p + dy * cos_p
    theta = np.arctan2(v / rb, u / ra)
    base = (ra * rb) / np.sqrt((rb * np.cos(theta)) ** 2 + (ra * np.sin(theta)) ** 2)

    # draw the boundary modulation unconditionally to keep the RNG stream
    # aligned between classes
    mods = []
    for f in params.spike_frequencies:
        weight = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        mods.append(weight * np.sin(f * theta + phase))
    amplitude = rng.uniform(*params.spike_amplitude)
    if spiculated:
        wobble = sum(mods) / len(mods)
        radius = base * (1.0 + amplitude * wobble)
    else:
        radius = base

    dist = np.sqrt((u / 1.0) ** 2 + (v / 1.0) ** 2)
    mask = 1.0 / (1.0 + np.exp((dist - radius) / params.edge_softness))
    if spiculated and params.grain_amplitude > 0:
        yy_g, xx_g = np.mgrid[0:size, 0:size]
        checker = ((xx_g + yy_g) % 2) * 2.0 - 1.0
        mask_grain = params.grain_amplitude * checker * mask
    else:
        mask_grain = np.zeros_like(mask)
    return mask, mask_grain


def _render_background(size: int, rng: np.random.Generator,
                       params: SyntheticParams) -> np.ndarray:
    level = rng.uniform(*params.background_level)
    coarse = rng.normal(0, 1, size=(size // 4, size // 4))
    texture = bilinear_resize(coarse, size, size)
    return level + params.texture_strength * texture


def generate_synthetic(n_per_class: int, image_size: int = 32, seed: int = 0,
                       class_params: Optional[SyntheticParams] = None) -> Dataset:
    """Deterministic two-class blob dataset; see the module docstring."""
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 16:
        raise ConfigurationError(f"image_size must be >= 16, got {image_size}")
    params = class_params or SyntheticParams()
    rng = np.random.default_rng(seed)
    images = np.zeros((2 * n_per_class, 1, image_size, image_size), dtype=np.float64)
    labels = np.zeros(2 * n_per_class, dtype=np.int64)
    ids = []
    for i in range(2 * n_per_class):
        label = i % 2
        bg = _render_background(image_size, rng, params)
        mask, grain = _render_blob(image_size, rng, params, spiculated=(label == 1))
        contrast = rng.uniform(*params.blob_contrast)
        img = bg + contrast * mask + grain
        img = img + rng.normal(0, params.noise_sigma, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = label
        ids.append(f"syn-{seed}-{i:05d}")
    return Dataset(images, labels, ids,
                   provenance={"kind": "synthetic", "seed": seed,
                               "n_per_class": n_per_class, "image_size": image_size,
                               "params": asdict(params)})


# ---------------------------------------------------------------------------
# image-folder ingestion
# ---------------------------------------------------------------------------

def load_image_folder(manifest_path, target_size: int = 224,
                      strict: bool = True) -> Dataset:
    """CSV manifest (columns path,label) -> zero-pad to square, resize,
    grayscale in [0, 1]. Strict mode aborts on the first bad row; lenient
    mode skips bad rows with a warning."""
    from PIL import Image, UnidentifiedImageError
    import os

    base = os.path.dirname(os.fspath(manifest_path))
    images, labels, ids = [], [], []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ConfigurationError(f"{manifest_path}: empty manifest")
    header = [cell.strip().lower() for cell in rows[0]]
    if header != ["path", "label"]:
        raise ConfigurationError(
            f"{manifest_path}: expected header 'path,label', got {rows[0]}")

    for row_num, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != 2:
                raise IngestError(row_num, f"expected 2 columns, got {len(row)}")
            path, label_name = row[0].strip(), row[1].strip().lower()
            if label_name not in LABEL_NAMES:
                raise IngestError(row_num, f"label {label_name!r} not in "
                                           f"{sorted(LABEL_NAMES)}")
            full = path if os.path.isabs(path) else os.path.join(base, path)
            if not os.path.exists(full):
                raise IngestError(row_num, f"missing file {full}")
            try:
                with Image.open(full) as im:
                    gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestError(row_num, f"unreadable image {full}: {exc}") from exc
            square = pad_to_square(gray)
            resized = bilinear_resize(square, target_size, target_size)
            images.append(np.clip(resized, 0.0, 1.0)[None])
            labels.append(LABEL_NAMES[label_name])
            ids.append(f"row{row_num}:{path}")
        except IngestError as err:
            if strict:
                raise
            warnings.warn(str(err), stacklevel=2)
    if not images:
        raise ConfigurationError(f"{manifest_path}: no usable rows")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), ids,
                   provenance={"kind": "folder", "manifest": os.fspath(manifest_path),
                               "target_size": target_size})


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldSplit:
    assignments: np.ndarray      # fold index per sample position
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def kfold_split(dataset: Dataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded stratified partition: per class, shuffle then deal round-robin."""
    labels = dataset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if k > counts.min():
        raise ConfigurationError(
            f"k={k} exceeds the smallest class count {counts.min()}")
    rng = np.random.default_rng(seed)
    assignments = np.full(len(dataset), -1, dtype=np.int64)
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        for pos, sample in enumerate(members):
            assignments[sample] = pos % k
    return FoldSplit(assignments=assignments, k=k)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def f1_sensitivity(predictions, labels) -> tuple[float, float]:
    """F1 and sensitivity for the positive (malignant = 1) class; both fall
    back to 0 in degenerate cases."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ConfigurationError(
            f"predictions {predictions.shape} vs labels {labels.shape}")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return f1, recall


def evaluate_under_attack(model: Model, test_set: Dataset,
                          attack_cfgs: dict[str, AttackConfig],
                          batch_size: int = 32) -> dict[str, dict[str, float]]:
    """White-box evaluation: one row per attack plus the clean row."""
    from .defenses import predict

    rows: dict[str, dict[str, float]] = {}
    preds = predict(model, test_set.images, batch_size=batch_size)
    f1, sens = f1_sensitivity(preds, test_set.labels)
    rows["none"] = {"f1": f1, "sensitivity": sens}
    for name, cfg in attack_cfgs.items():
        adv_parts = []
        for start in range(0, len(test_set), batch_size):
            xb = test_set.images[start:start + batch_size]
            yb = test_set.labels[start:start + batch_size]
            adv_parts.append(run_attack(model, xb, yb, cfg))
        adv = np.concatenate(adv_parts)
        preds = predict(model, adv, batch_size=batch_size)
        f1, sens = f1_sensitivity(preds, test_set.labels)
        rows[name] = {"f1": f1, "sensitivity": sens}
    return rows


@dataclass
class MetricsReport:
    """Fold-level F1/sensitivity per (defense, attack), with exact means."""
    config_fingerprint: str = ""
    folds: dict = field(default_factory=dict)   # (defense, attack) -> list of dicts

    def add_fold(self, defense: str, attack: str, fold: int,
                 f1: float, sensitivity: float):
        self.folds.setdefault((defense, attack), []).append(
            {"fold": fold, "f1": f1, "sensitivity": sensitivity})

    def mean(self, defense: str, attack: str) -> dict[str, float]:
        entries = self.folds[(defense, attack)]
        return {
            "f1": float(np.mean([e["f1"] for e in entries])),
            "sensitivity": float(np.mean([e["sensitivity"] for e in entries])),
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["defense", "attack", "f1_mean", "sensitivity_mean",
                             "fold", "f1", "sensitivity"])
            for (defense, attack) in sorted(self.folds):
                mean = self.mean(defense, attack)
                for e in sorted(self.folds[(defense, attack)], key=lambda e: e["fold"]):
                    writer.writerow([defense, attack,
                                     f"{mean['f1']:.6f}", f"{mean['sensitivity']:.6f}",
                                     e["fold"], f"{e['f1']:.6f}",
                                     f"{e['sensitivity']:.6f}"])

    def to_json(self, path):
        nested: dict = {"config_fingerprint": self.config_fingerprint, "results": {}}
        for (defense, attack) in sorted(self.folds):
            cell = nested["results"].setdefault(defense, {})
            cell[attack] = {
                "mean": self.mean(defense, attack),
                "folds": sorted(self.folds[(defense, attack)], key=lambda e: e["fold"]),
            }
        with open(path, "w") as fh:
            json.dump(nested, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# residual maps
# ---------------------------------------------------------------------------

@dataclass
class ResidualMap:
    values: np.ndarray           # (H, W), non-negative
    layer_name: str
    attack: str = ""


def residual_map(model: Model, x_clean: np.ndarray, x_adv: np.ndarray,
                 layer_name: str, attack: str = "") -> ResidualMap:
    """Channel-summed absolute difference of the feature maps at a layer."""
    with no_grad():
        _, clean_acts = forward(model, Tensor(np.asarray(x_clean, dtype=model.dtype)),
                                capture=[layer_name])
        _, adv_acts = forward(model, Tensor(np.asarray(x_adv, dtype=model.dtype)),
                              capture=[layer_name])
    diff = np.abs(clean_acts[layer_name].data - adv_acts[layer_name].data)
    if diff.ndim == 4:
        values = diff.sum(axis=1)[0]
    else:
        values = diff[0][None, :] if diff.ndim == 2 else diff
    return ResidualMap(values=values, layer_name=layer_name, attack=attack)


def save_residual_map(rm: ResidualMap, png_path, raw_path) -> None:
    """Portable grayscale image (max-normalized) plus the raw values."""
    from PIL import Image

    peak = rm.values.max()
    norm = rm.values / peak if peak > 0 else rm.values
    Image.fromarray((np.clip(norm, 0, 1) * 255).astype(np.uint8), mode="L").save(png_path)
    np.save(raw_path, rm.values)
