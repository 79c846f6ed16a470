"""Loss, AMSGrad optimizer, plateau schedule, metrics and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import StructureRecord, dataset_statistics
from .model import ENERGY_CENTRIC, SpinConvNet, make_batch, random_rotations, save_checkpoint

log = logging.getLogger(__name__)

# Thresholds of the EFwT metric.
EFWT_ENERGY = 0.02  # eV
EFWT_FORCE = 0.03  # eV/Å

METRICS_COLUMNS = (
    "step",
    "lr",
    "train_loss",
    "val_energy_mae",
    "val_force_mae",
    "val_force_cos",
    "val_efwt",
)


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    energy_weight: float = 1.0
    force_weight: float = 100.0
    lr: float = 1e-3
    decay: float = 0.8  # plateau factor
    patience: int = 3  # validation rounds without improvement
    eval_every: int = 200  # steps
    max_steps: int = 2000
    seed: int = 0
    force_only: bool = False
    # rotations drawn per training step for the force-centric head; 0 uses the model's count
    train_rotations: int = 0
    checkpoint_every: int = 0  # steps; 0 only writes the final checkpoint
    # finite-difference step (Å) for the energy-centric force-loss gradient
    hvp_step: float = 1e-4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.energy_weight < 0 or self.force_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1 or self.eval_every < 1:
            raise ValueError("patience and eval_every must be at least 1")
        if self.max_steps < 0 or self.train_rotations < 0 or self.checkpoint_every < 0:
            raise ValueError("max_steps, train_rotations and checkpoint_every must be non-negative")
        if self.hvp_step <= 0:
            raise ValueError("hvp_step must be positive")

    @property
    def effective_energy_weight(self) -> float:
        return 0.0 if self.force_only else self.energy_weight


@dataclass
class MetricsReport:
    energy_mae: float  # eV per structure
    force_mae: float  # eV/Å per component
    force_cos: float
    efwt: float
    n_structures: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss


def loss(pred_energy, pred_forces, target_energy, target_forces, config: TrainConfig) -> Tensor:
    """``w_E * L1(E) + w_F * L1(F)``; the force term averages atoms and components."""
    total = ad.as_tensor(0.0)
    w_e = config.effective_energy_weight
    if w_e > 0:
        total = total + w_e * ad.l1(pred_energy, np.asarray(target_energy, dtype=np.float64))
    if config.force_weight > 0 and pred_forces is not None:
        total = total + config.force_weight * ad.l1(
            pred_forces, np.asarray(target_forces, dtype=np.float64)
        )
    return total


# ---------------------------------------------------------------------------
# optimizer and schedule


class AMSGrad:
    """Adam with the running maximum of the second moment."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v_max = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            np.maximum(self.v_max[k], self.v[k], out=self.v_max[k])
            denom = np.sqrt(self.v_max[k]) / np.sqrt(c2) + self.eps
            p.data = p.data - (self.lr / c1) * self.m[k] / denom


def lr_schedule(history: Sequence[float], config: TrainConfig) -> float:
    """Learning rate after a sequence of validation errors.

    The rate is multiplied by ``decay`` each time ``patience`` consecutive
    evaluations fail to beat the best value so far.
    """
    if len(history) == 0:
        raise ValueError("validation history is empty")
    lr = config.lr
    best = np.inf
    wait = 0
    for value in history:
        if value < best:
            best = value
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                lr *= config.decay
                wait = 0
    return lr


# ---------------------------------------------------------------------------
# one step


def _targets(records: Sequence[StructureRecord]):
    energy = np.array([r.energy for r in records], dtype=np.float64)
    forces = np.concatenate([r.forces for r in records])
    return energy, forces


def _check_finite(value: float, grads: dict, step: int | None) -> None:
    where = f" at step {step}" if step is not None else ""
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}{where}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}{where}")


def loss_and_grads(
    net: SpinConvNet,
    records: Sequence[StructureRecord],
    config: TrainConfig,
    rotations: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and its gradient for every parameter."""
    params = net.parameters()
    names = list(params)
    batch = make_batch([r.system() for r in records], net.config)
    target_e, target_f = _targets(records)
    if net.config.variant == ENERGY_CENTRIC:
        return _energy_centric_grads(net, batch, target_e, target_f, config)
    energies, forces = net.forward(batch, rotations=rotations, forces=config.force_weight > 0)
    total = loss(energies, forces, target_e, target_f, config)
    if not total.requires_grad:
        return float(total.data), {k: np.zeros_like(params[k].data) for k in names}
    g = ad.grad(total, [params[k] for k in names])
    return float(total.data), dict(zip(names, g))


def _energy_centric_grads(net, batch, target_e, target_f, config):
    """Loss gradient when forces are ``-dE/dx``.

    The force term needs the mixed derivative ``d/dtheta (v . dE/dx)``, with
    ``v`` the loss sensitivity to the forces. The engine is first order, so
    this is taken as a central difference of parameter gradients along ``v``.
    """
    params = net.parameters()
    names = list(params)
    tensors = [params[k] for k in names]

    def energy_grads(positions, weights):
        tracked = Tensor(positions, requires_grad=True)
        h, _, _ = net.messages(batch, tracked)
        energies = net.energies(batch, h)
        out = ad.sum_(energies * weights)
        return energies, ad.grad(out, tensors + [tracked])

    ones = np.ones(batch.n_systems)
    energies, g = energy_grads(batch.positions, ones)
    forces = -g[-1]
    w_e = config.effective_energy_weight
    n_sys = batch.n_systems
    err_e = energies.data - target_e
    err_f = forces - target_f
    value = w_e * np.abs(err_e).mean() + config.force_weight * np.abs(err_f).mean()
    grads = {k: np.zeros_like(params[k].data) for k in names}
    if w_e > 0:
        _, ge = energy_grads(batch.positions, w_e * np.sign(err_e) / n_sys)
        for k, gk in zip(names, ge):
            grads[k] += gk
    if config.force_weight > 0:
        v = config.force_weight * np.sign(err_f) / err_f.size
        scale = np.max(np.abs(v))
        if scale > 0:
            h = config.hvp_step / scale
            _, gp = energy_grads(batch.positions + h * v, ones)
            _, gm = energy_grads(batch.positions - h * v, ones)
            # dL/dtheta = -d/dtheta (v . grad_x E)
            for k, a, b in zip(names, gp, gm):
                grads[k] -= (a - b) / (2.0 * h)
    return float(value), grads


def train_step(
    net: SpinConvNet,
    records: Sequence[StructureRecord],
    optimizer: AMSGrad,
    config: TrainConfig,
    rotations: np.ndarray | None = None,
    step: int | None = None,
) -> float:
    """One optimizer update on ``records``; returns the pre-update loss."""
    value, grads = loss_and_grads(net, records, config, rotations)
    _check_finite(value, grads, step)
    optimizer.step(grads)
    return value


# ---------------------------------------------------------------------------
# evaluation


def compute_metrics(
    pred_energy: Sequence[float],
    pred_forces: Sequence[np.ndarray],
    records: Sequence[StructureRecord],
) -> MetricsReport:
    if len(records) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred_energy = np.asarray(pred_energy, dtype=np.float64)
    target_e = np.array([r.energy for r in records])
    de = np.abs(pred_energy - target_e)
    abs_f, cos, within = [], [], []
    for pf, r in zip(pred_forces, records):
        pf = np.asarray(pf, dtype=np.float64)
        diff = np.abs(pf - r.forces)
        abs_f.append(diff.ravel())
        norms = np.linalg.norm(pf, axis=1) * np.linalg.norm(r.forces, axis=1)
        cos.append(np.sum(pf * r.forces, axis=1) / np.maximum(norms, 1e-300))
        within.append(bool(np.all(diff < EFWT_FORCE)))
    cos = np.clip(np.concatenate(cos), -1.0, 1.0)
    return MetricsReport(
        energy_mae=float(de.mean()),
        force_mae=float(np.concatenate(abs_f).mean()),
        force_cos=float(cos.mean()),
        efwt=float(np.mean((de < EFWT_ENERGY) & np.array(within))),
        n_structures=len(records),
    )


def predict(
    net: SpinConvNet,
    records: Sequence[StructureRecord],
    batch_size: int = 16,
    rotations: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Energies and per-structure forces."""
    energies, forces = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = make_batch([r.system() for r in chunk], net.config)
        e, f = net.forward(batch, rotations=rotations)
        energies.extend(e.data.tolist())
        f = f.data
        for i in range(len(chunk)):
            forces.append(f[batch.system == i].copy())
    return np.array(energies), forces


def evaluate(
    net: SpinConvNet,
    records: Sequence[StructureRecord],
    batch_size: int = 16,
    rotations: np.ndarray | None = None,
) -> MetricsReport:
    energies, forces = predict(net, records, batch_size, rotations)
    return compute_metrics(energies, forces, records)


def median_baseline(stats: dict, records: Sequence[StructureRecord]):
    """Predict the dataset's median energy and median force components everywhere."""
    e = np.full(len(records), stats["median_energy"])
    f = [np.tile(np.asarray(stats["median_force"]), (len(r.numbers), 1)) for r in records]
    return e, f


def baseline_metrics(stats: dict, records: Sequence[StructureRecord]) -> MetricsReport:
    return compute_metrics(*median_baseline(stats, records), records)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: SpinConvNet
    history: list[dict]
    final: MetricsReport | None
    steps: int


def train(
    net: SpinConvNet,
    train_records: Sequence[StructureRecord],
    val_records: Sequence[StructureRecord],
    config: TrainConfig,
    out_dir=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``config.max_steps`` updates, validating every ``eval_every`` steps.

    With ``out_dir`` set, ``metrics.csv`` gets one row per validation and
    checkpoints are written there. All randomness (batch order, training
    rotations) comes from ``config.seed``.
    """
    if not train_records:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    optimizer = AMSGrad(net.parameters(), lr=config.lr)
    n_rot = config.train_rotations or net.config.rotation_samples
    val_rotations = random_rotations(np.random.default_rng(config.seed + 1), net.config.rotation_samples)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
    history: list[dict] = []
    val_errors: list[float] = []
    window: list[float] = []
    order = np.array([], dtype=int)
    report = None
    try:
        for step in range(1, config.max_steps + 1):
            if len(order) < config.batch_size:
                order = np.concatenate([order, rng.permutation(len(train_records))])
            idx, order = order[: config.batch_size], order[config.batch_size :]
            rotations = random_rotations(rng, n_rot)
            value = train_step(net, [train_records[i] for i in idx], optimizer, config, rotations, step)
            window.append(value)
            if callback is not None:
                callback(step, value)
            last = step == config.max_steps
            if step % config.eval_every == 0 or last:
                row = {"step": step, "lr": optimizer.lr, "train_loss": float(np.mean(window))}
                window = []
                if val_records:
                    report = evaluate(net, val_records, rotations=val_rotations)
                    row.update({f"val_{k}": v for k, v in report.as_dict().items() if k != "n_structures"})
                    val_errors.append(
                        config.effective_energy_weight * report.energy_mae
                        + config.force_weight * report.force_mae
                    )
                    optimizer.lr = lr_schedule(val_errors, config)
                history.append(row)
                log.info("step %d  %s", step, {k: round(v, 5) for k, v in row.items()})
                if writer is not None:
                    writer.writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])
                    handle.flush()
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(net, out / f"checkpoint_{step:06d}.json", {"step": step})
    finally:
        if writer is not None:
            handle.close()
    if out is not None:
        save_checkpoint(net, out / "checkpoint.json", {"step": config.max_steps})
    return TrainResult(net, history, report, config.max_steps)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


__all__ = [
    "AMSGrad",
    "MetricsReport",
    "TrainConfig",
    "TrainingError",
    "baseline_metrics",
    "compute_metrics",
    "dataset_statistics",
    "evaluate",
    "loss",
    "lr_schedule",
    "median_baseline",
    "predict",
    "train",
    "train_step",
]
