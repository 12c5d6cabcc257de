"""YAML run configuration: schema validation with field-level errors.

Unknown keys are rejected everywhere; every referenced path must exist at
validation time. A validated config maps onto the dataclasses the library
modules consume.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .attacks import AttackConfig
from .contrastive import AugmentConfig, PretrainConfig
from .data import SyntheticParams
from .defenses import DEFENSES, TrainConfig
from .errors import ConfigurationError
from .nn import LayerSpec, default_classifier_spec


class ConfigError(ConfigurationError):
    """Invalid run config; carries the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config field '{path}': {message}")
        self.field_path = path


def _expect_mapping(value, path) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(section: dict, allowed: set[str], path: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(path, f"unknown key(s) {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")


_MISSING = object()


def _get(section: dict, key: str, path: str, types, default=_MISSING):
    if key not in section:
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}", "required key missing")
        return default
    value = section[key]
    type_tuple = types if isinstance(types, tuple) else (types,)
    names = "/".join(t.__name__ for t in type_tuple)
    if isinstance(value, bool) and bool not in type_tuple:
        raise ConfigError(f"{path}.{key}", f"expected {names}, got bool")
    if not isinstance(value, type_tuple):
        raise ConfigError(f"{path}.{key}", f"expected {names}, "
                                           f"got {type(value).__name__}")
    return value


@dataclass
class DatasetSection:
    kind: str
    n_per_class: int = 250
    image_size: int = 32
    manifest: Optional[str] = None
    target_size: int = 224
    params: Optional[SyntheticParams] = None


@dataclass
class SplitSection:
    kind: str = "kfold"
    k: int = 5
    fold: Optional[int] = None       # restrict to one fold; None = all


@dataclass
class ModelSection:
    pooling: str = "maxpool"
    classes: int = 2
    dtype: str = "float32"
    layers: Optional[list[LayerSpec]] = None

    def layer_stack(self) -> list[LayerSpec]:
        return self.layers if self.layers is not None else \
            default_classifier_spec(self.pooling, self.classes)


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetSection
    split: SplitSection
    model: ModelSection
    train: TrainConfig
    attacks: dict[str, AttackConfig]
    pretrain: Optional[PretrainConfig] = None
    matrix: Optional[dict] = None            # {"defenses": [...], "pooling": [...]}
    eval_formats: tuple[str, ...] = ("csv", "json")
    residual_layer: str = "pool1"
    residual_ids: list[str] = field(default_factory=list)
    out_root: Optional[str] = None
    raw: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        canon = dict(self.raw)
        canon.pop("seed", None)
        blob = json.dumps(canon, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def run_dir(self, out_root) -> str:
        return os.path.join(out_root, f"{self.fingerprint()}-seed{self.seed}")


_TOP_KEYS = {"seed", "out", "dataset", "split", "model", "pretrain", "train",
             "attacks", "eval", "residuals", "matrix"}


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError("(file)", f"config file {path} does not exist")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("(file)", f"invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    raw = _expect_mapping(raw, "(top level)")
    return parse_config(raw, seed_override=seed_override, base_dir=os.path.dirname(
        os.path.abspath(path)))


def parse_config(raw: dict, seed_override: Optional[int] = None,
                 base_dir: str = ".") -> RunConfig:
    _check_keys(raw, _TOP_KEYS, "(top level)")
    seed = _get(raw, "seed", "(top level)", int, 0)
    if seed_override is not None:
        seed = seed_override

    dataset = _parse_dataset(_expect_mapping(_get(raw, "dataset", "(top level)", dict),
                                             "dataset"), base_dir)
    split = _parse_split(raw.get("split", {}), dataset)
    model = _parse_model(raw.get("model", {}))
    train = _parse_train(raw.get("train", {}), seed, model.pooling)
    attacks = _parse_attacks(raw.get("attacks", None))
    pretrain = _parse_pretrain(raw.get("pretrain", None), seed)
    matrix = _parse_matrix(raw.get("matrix", None))
    eval_formats, residual_layer, residual_ids = _parse_outputs(raw)

    out_root = raw.get("out")
    if out_root is not None and not isinstance(out_root, str):
        raise ConfigError("out", "expected a string path")

    return RunConfig(seed=seed, dataset=dataset, split=split, model=model,
                     train=train, attacks=attacks, pretrain=pretrain, matrix=matrix,
                     eval_formats=eval_formats, residual_layer=residual_layer,
                     residual_ids=residual_ids, out_root=out_root, raw=raw)


def _parse_dataset(section: dict, base_dir: str) -> DatasetSection:
    _check_keys(section, {"kind", "n_per_class", "image_size", "manifest",
                          "target_size", "params"}, "dataset")
    kind = _get(section, "kind", "dataset", str)
    if kind == "synthetic":
        n = _get(section, "n_per_class", "dataset", int, 250)
        size = _get(section, "image_size", "dataset", int, 32)
        if n < 1:
            raise ConfigError("dataset.n_per_class", f"must be >= 1, got {n}")
        if size < 16:
            raise ConfigError("dataset.image_size", f"must be >= 16, got {size}")
        params = None
        if "params" in section:
            pmap = _expect_mapping(section["params"], "dataset.params")
            try:
                params = SyntheticParams(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in pmap.items()})
            except TypeError as exc:
                raise ConfigError("dataset.params", str(exc)) from exc
        return DatasetSection(kind="synthetic", n_per_class=n, image_size=size,
                              params=params)
    if kind == "folder":
        manifest = _get(section, "manifest", "dataset", str)
        full = manifest if os.path.isabs(manifest) else os.path.join(base_dir, manifest)
        if not os.path.exists(full):
            raise ConfigError("dataset.manifest", f"file {full} does not exist")
        return DatasetSection(kind="folder", manifest=full,
                              target_size=_get(section, "target_size", "dataset",
                                               int, 224))
    raise ConfigError("dataset.kind", f"expected 'synthetic' or 'folder', got {kind!r}")


def _parse_split(section, dataset: DatasetSection) -> SplitSection:
    section = _expect_mapping(section, "split") if section else {}
    _check_keys(section, {"kind", "k", "fold"}, "split")
    kind = _get(section, "kind", "split", str, "kfold")
    if kind != "kfold":
        raise ConfigError("split.kind", f"only 'kfold' is supported, got {kind!r}")
    k = _get(section, "k", "split", int, 5)
    if k < 2:
        raise ConfigError("split.k", f"must be >= 2, got {k}")
    fold = section.get("fold")
    if fold is not None:
        if not isinstance(fold, int) or not 0 <= fold < k:
            raise ConfigError("split.fold", f"must be an int in [0, {k}), got {fold!r}")
    return SplitSection(kind=kind, k=k, fold=fold)


def _parse_model(section) -> ModelSection:
    section = _expect_mapping(section, "model") if section else {}
    _check_keys(section, {"pooling", "classes", "dtype", "layers"}, "model")
    pooling = _get(section, "pooling", "model", str, "maxpool")
    if pooling not in ("maxpool", "dropmax"):
        raise ConfigError("model.pooling", f"expected maxpool or dropmax, got {pooling!r}")
    classes = _get(section, "classes", "model", int, 2)
    dtype = _get(section, "dtype", "model", str, "float32")
    if dtype not in ("float32", "float64"):
        raise ConfigError("model.dtype", f"expected float32 or float64, got {dtype!r}")
    layers = None
    if "layers" in section:
        if not isinstance(section["layers"], list):
            raise ConfigError("model.layers", "expected a list of layer mappings")
        layers = []
        for i, entry in enumerate(section["layers"]):
            entry = _expect_mapping(entry, f"model.layers[{i}]")
            try:
                layers.append(LayerSpec(**entry))
            except (TypeError, ConfigurationError) as exc:
                raise ConfigError(f"model.layers[{i}]", str(exc)) from exc
    return ModelSection(pooling=pooling, classes=classes, dtype=dtype, layers=layers)


def _parse_train(section, seed: int, pooling: str) -> TrainConfig:
    section = _expect_mapping(section, "train") if section else {}
    _check_keys(section, {"defense", "alpha", "beta", "num_instances",
                          "trajectory_steps", "epsilon", "epochs", "batch_size",
                          "learning_rate", "gr_lambda", "init_from"}, "train")
    beta = section.get("beta", list(TrainConfig().beta))
    if not isinstance(beta, list) or not all(isinstance(b, (int, float)) for b in beta):
        raise ConfigError("train.beta", "expected a list of numbers")
    try:
        return TrainConfig(
            defense=_get(section, "defense", "train", str, "standard"),
            alpha=float(_get(section, "alpha", "train", (int, float), 1.0)),
            beta=tuple(float(b) for b in beta),
            num_instances=_get(section, "num_instances", "train", int, len(beta)),
            trajectory_steps=_get(section, "trajectory_steps", "train", int, 10),
            epsilon=float(_get(section, "epsilon", "train", (int, float), 5.0 / 255.0)),
            epochs=_get(section, "epochs", "train", int, 100),
            batch_size=_get(section, "batch_size", "train", int, 8),
            learning_rate=float(_get(section, "learning_rate", "train",
                                     (int, float), 1e-4)),
            gr_lambda=float(_get(section, "gr_lambda", "train", (int, float), 1.0)),
            seed=seed,
            pooling=pooling,
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("train", str(exc)) from exc


def _parse_attacks(section) -> dict[str, AttackConfig]:
    if section is None:
        from .attacks import evaluation_attacks
        return evaluation_attacks()
    if not isinstance(section, list):
        raise ConfigError("attacks", "expected a list of attack mappings")
    out = {}
    for i, entry in enumerate(section):
        entry = dict(_expect_mapping(entry, f"attacks[{i}]"))
        _check_keys(entry, {"kind", "epsilon", "steps", "step_size", "kappa", "name"},
                    f"attacks[{i}]")
        name = entry.pop("name", entry.get("kind"))
        kwargs = {}
        if "kappa" in entry:
            kwargs["cw_kappa"] = float(entry.pop("kappa"))
        try:
            cfg = AttackConfig(kind=entry.get("kind", "pgd"),
                               epsilon=float(entry.get("epsilon", 5.0 / 255.0)),
                               steps=int(entry.get("steps", 20)),
                               step_size=float(entry.get("step_size", 0.001)),
                               **kwargs)
        except ConfigurationError as exc:
            raise ConfigError(f"attacks[{i}]", str(exc)) from exc
        if name in out:
            raise ConfigError(f"attacks[{i}].name", f"duplicate attack name {name!r}")
        out[name] = cfg
    return out


def _parse_pretrain(section, seed: int) -> Optional[PretrainConfig]:
    if section is None:
        return None
    section = _expect_mapping(section, "pretrain")
    _check_keys(section, {"steps", "batch_n", "tau", "learning_rate", "augment"},
                "pretrain")
    augment_cfg = AugmentConfig()
    if "augment" in section:
        amap = _expect_mapping(section["augment"], "pretrain.augment")
        _check_keys(amap, {"crop_scale", "flip_prob", "brightness", "contrast",
                           "noise_sigma"}, "pretrain.augment")
        try:
            augment_cfg = AugmentConfig(
                crop_scale=tuple(amap.get("crop_scale", (0.6, 1.0))),
                flip_prob=float(amap.get("flip_prob", 0.5)),
                brightness=float(amap.get("brightness", 0.2)),
                contrast=float(amap.get("contrast", 0.2)),
                noise_sigma=float(amap.get("noise_sigma", 0.02)),
            )
        except ConfigurationError as exc:
            raise ConfigError("pretrain.augment", str(exc)) from exc
    try:
        return PretrainConfig(
            steps=_get(section, "steps", "pretrain", int, 300),
            batch_n=_get(section, "batch_n", "pretrain", int, 8),
            tau=float(_get(section, "tau", "pretrain", (int, float), 0.5)),
            learning_rate=float(_get(section, "learning_rate", "pretrain",
                                     (int, float), 1e-3)),
            seed=seed,
            augment=augment_cfg,
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("pretrain", str(exc)) from exc


def _parse_matrix(section) -> Optional[dict]:
    if section is None:
        return None
    section = _expect_mapping(section, "matrix")
    _check_keys(section, {"defenses", "pooling"}, "matrix")
    defenses = section.get("defenses", ["standard"])
    pooling = section.get("pooling", ["maxpool"])
    if not isinstance(defenses, list) or not defenses:
        raise ConfigError("matrix.defenses", "expected a non-empty list")
    if not isinstance(pooling, list) or not pooling:
        raise ConfigError("matrix.pooling", "expected a non-empty list")
    for d in defenses:
        if d not in DEFENSES:
            raise ConfigError("matrix.defenses", f"unknown defense {d!r}")
    for p in pooling:
        if p not in ("maxpool", "dropmax"):
            raise ConfigError("matrix.pooling", f"unknown pooling {p!r}")
    return {"defenses": list(defenses), "pooling": list(pooling)}


def _parse_outputs(raw: dict):
    eval_section = raw.get("eval", {}) or {}
    eval_section = _expect_mapping(eval_section, "eval")
    _check_keys(eval_section, {"formats"}, "eval")
    formats = eval_section.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or not set(formats) <= {"csv", "json"}:
        raise ConfigError("eval.formats", f"expected a sublist of [csv, json], "
                                          f"got {formats!r}")
    res_section = raw.get("residuals", {}) or {}
    res_section = _expect_mapping(res_section, "residuals")
    _check_keys(res_section, {"layer", "sample_ids"}, "residuals")
    layer = res_section.get("layer", "pool1")
    ids = res_section.get("sample_ids", [])
    if not isinstance(layer, str):
        raise ConfigError("residuals.layer", "expected a string layer name")
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise ConfigError("residuals.sample_ids", "expected a list of sample ids")
    return tuple(formats), layer, list(ids)
