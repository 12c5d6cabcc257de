"""Command-line entry point: pretrain, train, evaluate, residuals.

Every command validates the whole config before touching the filesystem.
Exit codes: 0 success, 1 runtime failure, 2 invalid config/arguments.
All outputs land under ``<out>/<config-hash>-seed<seed>/``; reruns with the
same inputs produce byte-identical files (timing goes to a separate log).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacks as attacks_mod
from . import contrastive, data, defenses, nn
from .config import ConfigError, RunConfig, load_config
from .errors import ConfigurationError, RobustLabError

OUT_ROOT_ENV = "ROBUSTLAB_OUT"


def _out_root(cfg: RunConfig, cli_out) -> str:
    return cli_out or cfg.out_root or os.environ.get(OUT_ROOT_ENV, "runs")


def _load_dataset(cfg: RunConfig, strict: bool) -> data.Dataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return data.generate_synthetic(d.n_per_class, d.image_size, seed=cfg.seed,
                                       class_params=d.params)
    return data.load_image_folder(d.manifest, target_size=d.target_size, strict=strict)


def _model_dtype(cfg: RunConfig):
    return np.float32 if cfg.model.dtype == "float32" else np.float64


def _input_shape(cfg: RunConfig, dataset: data.Dataset):
    return tuple(dataset.images.shape[1:])


def _folds(cfg: RunConfig):
    return [cfg.split.fold] if cfg.split.fold is not None else list(range(cfg.split.k))


def _matrix_cells(cfg: RunConfig):
    if cfg.matrix is None:
        return [(cfg.train.defense, cfg.model.pooling)]
    return [(d, p) for d in cfg.matrix["defenses"] for p in cfg.matrix["pooling"]]


def _cell_train_config(cfg: RunConfig, defense: str, pooling: str) -> defenses.TrainConfig:
    from dataclasses import replace
    return replace(cfg.train, defense=defense, pooling=pooling)


def _build_cell_model(cfg: RunConfig, pooling: str, input_shape, encoder=None):
    if cfg.model.layers is not None:
        spec = cfg.model.layers
    else:
        spec = nn.default_classifier_spec(pooling, cfg.model.classes)
    if encoder is not None:
        return contrastive.transfer(encoder, spec, seed=cfg.seed,
                                    input_shape=input_shape, dtype=_model_dtype(cfg))
    return nn.build_model(spec, seed=cfg.seed, input_shape=input_shape,
                          dtype=_model_dtype(cfg))


def cmd_pretrain(cfg: RunConfig, out_dir: str, strict: bool) -> int:
    if cfg.pretrain is None:
        raise ConfigError("pretrain", "command needs a pretrain section")
    dataset = _load_dataset(cfg, strict)
    encoder = nn.build_model(nn.encoder_spec(cfg.model.pooling), seed=cfg.seed,
                             input_shape=_input_shape(cfg, dataset),
                             dtype=_model_dtype(cfg))
    encoder, losses = contrastive.pretrain(encoder, dataset.images, cfg.pretrain)
    path = os.path.join(out_dir, "encoder.ckpt")
    nn.save_checkpoint(encoder, path)
    if losses:
        head = ", ".join(f"{v:.4f}" for v in losses[:3])
        print(f"pretrained {len(losses)} steps: loss {head} ... {losses[-1]:.4f}")
    else:
        print("pretrained 0 steps: encoder equals initialization")
    print(f"wrote {path}")
    return 0


def cmd_train(cfg: RunConfig, out_dir: str, strict: bool) -> int:
    dataset = _load_dataset(cfg, strict)
    split = data.kfold_split(dataset, k=cfg.split.k, seed=cfg.seed)
    input_shape = _input_shape(cfg, dataset)
    encoder = None
    init_from = cfg.raw.get("train", {}).get("init_from")
    if init_from:
        encoder = nn.load_checkpoint(init_from)
    for defense, pooling in _matrix_cells(cfg):
        cell_dir = os.path.join(out_dir, f"{defense}-{pooling}")
        os.makedirs(cell_dir, exist_ok=True)
        cell_cfg = _cell_train_config(cfg, defense, pooling)
        for fold in _folds(cfg):
            model = _build_cell_model(cfg, pooling, input_shape, encoder)
            train_idx = split.train_indices(fold)
            model, history = defenses.train(model, dataset.images[train_idx],
                                            dataset.labels[train_idx], cell_cfg)
            nn.save_checkpoint(model, os.path.join(cell_dir, f"fold{fold}.ckpt"))
            history.to_csv(os.path.join(cell_dir, f"fold{fold}-history.csv"))
            history.write_timing(os.path.join(cell_dir, f"fold{fold}-timing.log"))
            print(f"trained {defense}/{pooling} fold {fold}: "
                  f"{len(history.records)} epochs")
    return 0


def cmd_evaluate(cfg: RunConfig, out_dir: str, strict: bool) -> int:
    dataset = _load_dataset(cfg, strict)
    split = data.kfold_split(dataset, k=cfg.split.k, seed=cfg.seed)
    report = data.MetricsReport(config_fingerprint=cfg.fingerprint())
    for defense, pooling in _matrix_cells(cfg):
        cell_dir = os.path.join(out_dir, f"{defense}-{pooling}")
        expect = cfg.model.layers or nn.default_classifier_spec(pooling,
                                                                cfg.model.classes)
        for fold in _folds(cfg):
            ckpt = os.path.join(cell_dir, f"fold{fold}.ckpt")
            if not os.path.exists(ckpt):
                raise ConfigError("(checkpoints)",
                                  f"missing checkpoint {ckpt}; run train first")
            model = nn.load_checkpoint(ckpt, expect_layers=expect)
            test = dataset.subset(split.test_indices(fold))
            rows = data.evaluate_under_attack(model, test, cfg.attacks)
            for attack_name, metrics in rows.items():
                report.add_fold(defense, attack_name, fold,
                                metrics["f1"], metrics["sensitivity"])
    if "csv" in cfg.eval_formats:
        report.to_csv(os.path.join(out_dir, "metrics.csv"))
        print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    if "json" in cfg.eval_formats:
        report.to_json(os.path.join(out_dir, "metrics.json"))
        print(f"wrote {os.path.join(out_dir, 'metrics.json')}")
    return 0


def cmd_residuals(cfg: RunConfig, out_dir: str, strict: bool) -> int:
    if not cfg.residual_ids:
        raise ConfigError("residuals.sample_ids", "no sample ids configured")
    dataset = _load_dataset(cfg, strict)
    indices = [dataset.index_of(sid) for sid in cfg.residual_ids]
    res_dir = os.path.join(out_dir, "residuals")
    os.makedirs(res_dir, exist_ok=True)
    count = 0
    for defense, pooling in _matrix_cells(cfg):
        cell_dir = os.path.join(out_dir, f"{defense}-{pooling}")
        fold = cfg.split.fold if cfg.split.fold is not None else 0
        ckpt = os.path.join(cell_dir, f"fold{fold}.ckpt")
        if not os.path.exists(ckpt):
            raise ConfigError("(checkpoints)",
                              f"missing checkpoint {ckpt}; run train first")
        model = nn.load_checkpoint(ckpt)
        for sid, idx in zip(cfg.residual_ids, indices):
            x = dataset.images[idx:idx + 1]
            y = dataset.labels[idx:idx + 1]
            for attack_name, atk in cfg.attacks.items():
                adv = attacks_mod.run_attack(model, x, y, atk)
                rm = data.residual_map(model, x, adv, cfg.residual_layer,
                                       attack=attack_name)
                stem = f"{defense}-{pooling}-{sid.replace(':', '_').replace('/', '_')}" \
                       f"-{attack_name}"
                data.save_residual_map(rm, os.path.join(res_dir, stem + ".png"),
                                       os.path.join(res_dir, stem + ".npy"))
                count += 1
    print(f"wrote {count} residual maps to {res_dir}")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "residuals": cmd_residuals,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustlab",
        description="Desk-scale adversarial robustness experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help=f"output root (default: config 'out', then "
                            f"${OUT_ROOT_ENV}, then ./runs)")
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--strict", dest="strict", action="store_true",
                          default=True, help="abort on bad manifest rows (default)")
        mode.add_argument("--lenient", dest="strict", action="store_false",
                          help="skip bad manifest rows with a warning")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        out_dir = cfg.run_dir(_out_root(cfg, args.out))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, args.strict)
    except ConfigurationError as exc:
        # config-shaped problems (bad specs, unknown ids, checkpoint/spec
        # mismatches) exit 2; genuine runtime failures exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RobustLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
