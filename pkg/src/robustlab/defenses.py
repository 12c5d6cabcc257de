"""Defense losses (standard CE, AT, GR, TRADES, RST and its multi-instance
variant), the Adam optimizer, and the training loop wiring attacks into them.

The multi-instance loss weighs intermediate PGD iterates: with a T-step
trajectory x_1..x_{T+1} (x_1 clean), instance j is x_{2j+1}, so m instances
require 2m <= T. Adversarial instances are regenerated against the current
parameters every batch and enter the loss as fixed inputs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, Trajectory, pgd, project_linf, training_attack
from .errors import ConfigurationError, TrainingDiverged
from .nn import Model, forward
from .tensor import (Tensor, add, backward, kl_from_logits, mul, no_grad, pow_scalar,
                     sign, softmax_cross_entropy, sum_)

DEFENSES = ("standard", "at", "gr", "trades", "rst", "mirst")
BETA_DEFAULT = (0.34, 0.28, 0.22, 0.16)


@dataclass
class TrainConfig:
    defense: str = "standard"
    alpha: float = 1.0
    beta: tuple[float, ...] = BETA_DEFAULT
    num_instances: int = 4            # m
    trajectory_steps: int = 10        # T
    epsilon: float = 5.0 / 255.0
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    gr_lambda: float = 1.0
    seed: int = 0
    pooling: str = "maxpool"

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.validate()

    def validate(self):
        if self.defense not in DEFENSES:
            raise ConfigurationError(f"unknown defense {self.defense!r}, "
                                     f"expected one of {DEFENSES}")
        if len(self.beta) != self.num_instances:
            raise ConfigurationError(
                f"beta has {len(self.beta)} entries but num_instances={self.num_instances}")
        if any(b < 0 for b in self.beta):
            raise ConfigurationError(f"beta entries must be >= 0, got {self.beta}")
        if self.defense == "mirst" and 2 * self.num_instances + 1 > self.trajectory_steps + 1:
            raise ConfigurationError(
                f"{self.num_instances} instances need a trajectory of at least "
                f"{2 * self.num_instances} steps, configured {self.trajectory_steps}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs must be >= 0, batch_size >= 1, "
                                     "learning_rate > 0")
        if self.pooling not in ("maxpool", "dropmax"):
            raise ConfigurationError(f"pooling must be maxpool or dropmax, "
                                     f"got {self.pooling!r}")

    def attack(self) -> AttackConfig:
        return training_attack(epsilon=self.epsilon, steps=self.trajectory_steps)


def instance_indices(num_instances: int, trajectory_steps: int) -> list[int]:
    """List positions of the selected iterates: instance j is trajectory
    element 2j+1 (1-based), i.e. list index 2j."""
    if 2 * num_instances + 1 > trajectory_steps + 1:
        raise ConfigurationError(
            f"{num_instances} instances exceed a {trajectory_steps}-step trajectory")
    return [2 * j for j in range(1, num_instances + 1)]


# ---------------------------------------------------------------------------
# loss zoo; each returns (scalar Tensor, components dict)
# ---------------------------------------------------------------------------

def loss_standard(model: Model, x, y):
    loss = softmax_cross_entropy(forward(model, _as_tensor(x, model)), y)
    return loss, {"clean": loss.item(), "adv": 0.0}


def loss_at(model: Model, x, y, attack_cfg: AttackConfig, trajectory: Optional[Trajectory] = None):
    traj = trajectory if trajectory is not None else pgd(model, x, y, attack_cfg)
    loss = softmax_cross_entropy(forward(model, Tensor(traj.final)), y)
    return loss, {"clean": 0.0, "adv": loss.item()}


def loss_rst(model: Model, x, y, attack_cfg: AttackConfig, alpha: float = 1.0,
             trajectory: Optional[Trajectory] = None):
    """Clean CE plus alpha times CE on the strongest (final) PGD iterate."""
    clean = softmax_cross_entropy(forward(model, _as_tensor(x, model)), y)
    traj = trajectory if trajectory is not None else pgd(model, x, y, attack_cfg)
    adv = softmax_cross_entropy(forward(model, Tensor(traj.final)), y)
    total = add(clean, mul(adv, float(alpha)))
    return total, {"clean": clean.item(), "adv": adv.item()}


def loss_mirst(model: Model, x, y, attack_cfg: AttackConfig, alpha: float = 1.0,
               beta: Sequence[float] = BETA_DEFAULT,
               trajectory: Optional[Trajectory] = None,
               indices: Optional[Sequence[int]] = None):
    """Clean CE plus an alpha-weighted, beta-mixed sum of CE over several
    intermediate iterates of each sample's own trajectory."""
    beta = tuple(float(b) for b in beta)
    traj = trajectory if trajectory is not None else pgd(model, x, y, attack_cfg)
    if indices is None:
        indices = instance_indices(len(beta), len(traj.instances) - 1)
    if len(indices) != len(beta):
        raise ConfigurationError(f"{len(indices)} instance indices for "
                                 f"{len(beta)} beta weights")
    clean = softmax_cross_entropy(forward(model, _as_tensor(x, model)), y)
    adv_sum = None
    for b, idx in zip(beta, indices):
        ce = softmax_cross_entropy(forward(model, Tensor(traj.instances[idx])), y)
        term = mul(ce, b)
        adv_sum = term if adv_sum is None else add(adv_sum, term)
    total = add(clean, mul(adv_sum, float(alpha)))
    return total, {"clean": clean.item(), "adv": adv_sum.item()}


def loss_trades(model: Model, x, y, attack_cfg: AttackConfig, alpha: float = 1.0,
                init_seed: int = 0):
    """Clean CE plus alpha * KL(clean outputs || adversarial outputs), with the
    adversary crafted to maximize that KL term."""
    xt = _as_tensor(x, model)
    clean_logits = forward(model, xt)
    x_adv = _kl_adversary(model, xt.data, clean_logits.data, attack_cfg, init_seed)
    adv_logits = forward(model, Tensor(x_adv))
    clean = softmax_cross_entropy(clean_logits, y)
    kl = kl_from_logits(clean_logits, adv_logits)
    total = add(clean, mul(kl, float(alpha)))
    return total, {"clean": clean.item(), "adv": kl.item()}


def _kl_adversary(model: Model, x: np.ndarray, clean_logits: np.ndarray,
                  cfg: AttackConfig, init_seed: int) -> np.ndarray:
    """Sign-gradient ascent on KL(clean || f(x')) with the clean side frozen.

    The KL gradient vanishes exactly at the clean image, so the iteration
    starts from a small seeded perturbation inside the budget box.
    """
    target = Tensor(clean_logits)
    rng = np.random.default_rng(init_seed)
    noise = 0.001 * rng.standard_normal(x.shape).astype(model.dtype)
    cur = project_linf(x + noise, x, cfg.epsilon, cfg.valid_range)
    for _ in range(cfg.steps):
        xt = Tensor(cur, requires_grad=True)
        kl = kl_from_logits(target, forward(model, xt))
        grad = backward(kl, wrt=[xt])[xt]
        cur = cur + cfg.step_size * sign(grad).data.astype(model.dtype)
        cur = project_linf(cur, x, cfg.epsilon, cfg.valid_range)
    return cur


def loss_gr(model: Model, x, y, gr_lambda: float = 1.0):
    """Clean CE plus lambda * L2 norm of the input gradient of that CE.

    Differentiates through the gradient norm (double backpropagation), so the
    engine's create_graph path carries the second-order terms.
    """
    data = x.data if isinstance(x, Tensor) else x
    xt = Tensor(np.asarray(data, dtype=model.dtype), requires_grad=True)
    clean = softmax_cross_entropy(forward(model, xt), y)
    grad_x = backward(clean, wrt=[xt], create_graph=True)[xt]
    xt.grad = None
    penalty = pow_scalar(sum_(mul(grad_x, grad_x)), 0.5)
    total = add(clean, mul(penalty, float(gr_lambda)))
    return total, {"clean": clean.item(), "adv": penalty.item()}


def _as_tensor(x, model: Model) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=model.dtype))


def defense_loss(model: Model, x, y, cfg: TrainConfig, step: int = 0):
    """Dispatch the configured defense; returns (loss Tensor, components)."""
    if cfg.defense == "standard":
        return loss_standard(model, x, y)
    if cfg.defense == "at":
        return loss_at(model, x, y, cfg.attack())
    if cfg.defense == "rst":
        return loss_rst(model, x, y, cfg.attack(), alpha=cfg.alpha)
    if cfg.defense == "mirst":
        return loss_mirst(model, x, y, cfg.attack(), alpha=cfg.alpha, beta=cfg.beta)
    if cfg.defense == "trades":
        return loss_trades(model, x, y, cfg.attack(), alpha=cfg.alpha,
                           init_seed=cfg.seed * 100003 + step)
    if cfg.defense == "gr":
        return loss_gr(model, x, y, gr_lambda=cfg.gr_lambda)
    raise ConfigurationError(f"unknown defense {cfg.defense!r}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    clean_loss: float
    adv_loss: float
    wall_clock: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path):
        """Deterministic columns only; wall-clock stays out of this file."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total_loss", "clean_loss", "adv_loss"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.total_loss:.8f}",
                                 f"{r.clean_loss:.8f}", f"{r.adv_loss:.8f}"])

    def write_timing(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(f"epoch {r.epoch}: {r.wall_clock:.3f}s\n")


def train(model: Model, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Epoch loop: seeded shuffle, per-batch defense loss against adversaries
    regenerated for the current parameters, backward, Adam."""
    cfg.validate()
    n = len(labels)
    if n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = TrainHistory()
    params = model.parameters()
    names = list(params)

    global_step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        totals = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = np.asarray(images[idx], dtype=model.dtype)
            yb = labels[idx]
            loss, components = defense_loss(model, xb, yb, cfg, step=global_step)
            global_step += 1
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, batches,
                                       {"total": value, **components})
            grad_map = backward(loss, wrt=list(params.values()))
            grads = {name: grad_map[params[name]].data for name in names}
            adam_step(params, grads, state, lr=cfg.learning_rate)
            model.zero_grad()
            totals += (value, components["clean"], components["adv"])
            batches += 1
        history.records.append(EpochRecord(
            epoch=epoch,
            total_loss=totals[0] / batches,
            clean_loss=totals[1] / batches,
            adv_loss=totals[2] / batches,
            wall_clock=time.perf_counter() - t0,
        ))
    return model, history


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions; ties resolve to the lower class index."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            xb = np.asarray(images[start:start + batch_size], dtype=model.dtype)
            logits = forward(model, Tensor(xb))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
