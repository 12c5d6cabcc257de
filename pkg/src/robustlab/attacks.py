"""White-box L-infinity attacks: FGSM, trajectory-producing PGD, and CW.

All iterates stay inside the epsilon box around the clean input and inside
the valid pixel range. Attacks treat the model as frozen: only input
gradients are computed, parameter ``.grad`` buffers are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .nn import Model, forward
from .tensor import (Tensor, backward, cross_entropy_per_sample, mean_, mul, neg, relu,
                     sign, sub, take_flat)

EPSILON_DEFAULT = 5.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"                       # fgsm | pgd | cw
    epsilon: float = EPSILON_DEFAULT
    steps: int = 20
    step_size: float = 0.001
    cw_kappa: float = 0.0
    valid_range: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "cw"):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.kind != "fgsm" and self.step_size <= 0:
            raise ConfigurationError(f"step_size must be > 0, got {self.step_size}")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ConfigurationError(f"invalid pixel range {self.valid_range}")


def evaluation_attacks(epsilon: float = EPSILON_DEFAULT) -> dict[str, AttackConfig]:
    """The default evaluation battery: FGSM, 20-step PGD, 10-step CW."""
    return {
        "fgsm": AttackConfig(kind="fgsm", epsilon=epsilon, steps=1, step_size=epsilon),
        "pgd": AttackConfig(kind="pgd", epsilon=epsilon, steps=20, step_size=0.001),
        "cw": AttackConfig(kind="cw", epsilon=epsilon, steps=10, step_size=0.001),
    }


def training_attack(epsilon: float = EPSILON_DEFAULT, steps: int = 10) -> AttackConfig:
    """Trajectory generator for self-training; step size reaches the budget
    boundary within the step count (2.5 * eps / steps)."""
    return AttackConfig(kind="pgd", epsilon=epsilon, steps=steps,
                        step_size=2.5 * epsilon / steps)


@dataclass
class Trajectory:
    """PGD iterates x_1..x_{T+1}; index 0 is the clean input.

    ``losses[t]`` holds the per-sample cross-entropy at each instance,
    shape (steps+1, N).
    """
    instances: list[np.ndarray] = field(default_factory=list)
    losses: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.instances)

    @property
    def final(self) -> np.ndarray:
        return self.instances[-1]


def project_linf(candidate: np.ndarray, origin: np.ndarray, epsilon: float,
                 valid_range=(0.0, 1.0)) -> np.ndarray:
    """Clamp into the epsilon box around ``origin``, then into the pixel range."""
    out = np.clip(candidate, origin - epsilon, origin + epsilon)
    return np.clip(out, valid_range[0], valid_range[1])


def _as_array(x, dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return np.array(x.data, dtype=dtype, copy=True)
    return np.array(x, dtype=dtype, copy=True)


def _input_gradient(model: Model, x: np.ndarray, y: np.ndarray):
    """Batch-mean CE gradient w.r.t. the input, plus per-sample losses."""
    xt = Tensor(x, requires_grad=True)
    per_sample = cross_entropy_per_sample(forward(model, xt), y)
    loss = mean_(per_sample)
    grad = backward(loss, wrt=[xt])[xt]
    return grad, per_sample.data.copy()


def pgd(model: Model, x, y, cfg: AttackConfig) -> Trajectory:
    """T-step sign-gradient ascent on cross-entropy with box projection."""
    y = np.asarray(y)
    clean = _as_array(x, model.dtype)
    cur = clean.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        cur = project_linf(cur + rng.uniform(-cfg.epsilon, cfg.epsilon, size=cur.shape)
                           .astype(model.dtype), clean, cfg.epsilon, cfg.valid_range)

    traj = Trajectory(instances=[cur.copy()])
    losses = []
    for _ in range(cfg.steps):
        grad, step_losses = _input_gradient(model, cur, y)
        losses.append(step_losses)
        cur = cur + cfg.step_size * sign(grad).data.astype(model.dtype)
        cur = project_linf(cur, clean, cfg.epsilon, cfg.valid_range)
        traj.instances.append(cur.copy())
    # loss at the final iterate
    final_t = cross_entropy_per_sample(forward(model, Tensor(cur)), y)
    losses.append(final_t.data.copy())
    traj.losses = np.stack(losses)
    return traj


def fgsm(model: Model, x, y, epsilon: float = EPSILON_DEFAULT,
         valid_range=(0.0, 1.0)) -> np.ndarray:
    """Single sign-gradient step of size epsilon (PGD with T=1, gamma=eps).

    A zero budget degenerates cleanly: the projection returns the clean input.
    """
    cfg = AttackConfig(kind="pgd", epsilon=epsilon, steps=1,
                       step_size=epsilon if epsilon > 0 else 1.0,
                       valid_range=valid_range)
    return pgd(model, x, y, cfg).final


def cw_margin(logits: Tensor, y: np.ndarray, kappa: float) -> Tensor:
    """max(Z_y - max_{i != y} Z_i, -kappa), batch mean."""
    n, k = logits.shape
    y = np.asarray(y)
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), y] = 1.0
    masked = sub(logits, Tensor(onehot * 1e9))          # bury the true class
    best_other = take_flat(masked, np.arange(n) * k + np.argmax(masked.data, axis=1), (n,))
    true_logit = take_flat(logits, np.arange(n) * k + y.astype(np.int64), (n,))
    margin = sub(true_logit, best_other)
    # max(m, -kappa) == relu(m + kappa) - kappa
    clipped = sub(relu(margin + float(kappa)), Tensor(np.full(n, kappa, logits.dtype)))
    return mean_(clipped)


def cw_linf(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """PGD-style iteration that descends the logit-margin objective."""
    y = np.asarray(y)
    clean = _as_array(x, model.dtype)
    cur = clean.copy()
    for _ in range(cfg.steps):
        xt = Tensor(cur, requires_grad=True)
        objective = cw_margin(forward(model, xt), y, cfg.cw_kappa)
        grad = backward(neg(objective), wrt=[xt])[xt]   # ascend -margin
        cur = cur + cfg.step_size * sign(grad).data.astype(model.dtype)
        cur = project_linf(cur, clean, cfg.epsilon, cfg.valid_range)
    return cur


def run_attack(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Dispatch on ``cfg.kind`` and return the final adversarial batch."""
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, epsilon=cfg.epsilon, valid_range=cfg.valid_range)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg).final
    return cw_linf(model, x, y, cfg)


# ---------------------------------------------------------------------------
# inspection artifacts
# ---------------------------------------------------------------------------

def save_adversarial_grid(clean: np.ndarray, adversarial: np.ndarray, kind: str,
                          epsilon: float, png_path, manifest_path) -> None:
    """Dump rows of (clean, adversarial, amplified difference) plus a manifest."""
    import json

    from PIL import Image

    n = clean.shape[0]
    h, w = clean.shape[-2], clean.shape[-1]
    diff = adversarial - clean
    amp = np.clip(0.5 + diff / max(2 * epsilon, 1e-12) * 0.5, 0, 1)
    grid = np.zeros((3 * h, n * w))
    for i in range(n):
        grid[0:h, i * w:(i + 1) * w] = clean[i, 0]
        grid[h:2 * h, i * w:(i + 1) * w] = adversarial[i, 0]
        grid[2 * h:, i * w:(i + 1) * w] = amp[i, 0]
    Image.fromarray((np.clip(grid, 0, 1) * 255).astype(np.uint8), mode="L").save(png_path)
    with open(manifest_path, "w") as fh:
        json.dump({"attack": kind, "epsilon": epsilon, "count": n,
                   "rows": ["clean", "adversarial", "amplified_difference"],
                   "linf": float(np.max(np.abs(diff)))}, fh, indent=2, sort_keys=True)
