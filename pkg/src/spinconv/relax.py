"""Steepest-descent relaxation driven by any force provider, plus relaxation metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import AtomicSystem

CONVERGED = "converged"
MAX_ITER = "max_iterations"
NON_FINITE = "non_finite_forces"

# ADwT-style distance thresholds (Å) and AFbT-style force thresholds (eV/Å).
DISTANCE_THRESHOLDS = np.round(np.arange(1, 51) * 0.01, 2)
FORCE_THRESHOLDS = np.round(np.arange(1, 51) * 0.01, 2)

ForceFn = Callable[[AtomicSystem], np.ndarray]
BatchForceFn = Callable[[Sequence[AtomicSystem]], Sequence[np.ndarray]]


@dataclass
class RelaxConfig:
    max_iter: int = 200
    fmax: float = 0.05  # eV/Å, largest per-atom force norm at convergence
    cap: float = 0.05  # Å, largest per-atom displacement per step
    step: float = 0.01  # Å²/eV, x <- x + step * f

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.fmax <= 0 or self.cap <= 0 or self.step <= 0:
            raise ValueError("fmax, cap and step must be positive")


@dataclass
class Trajectory:
    """Positions visited by one relaxation; ``positions[0]`` is the start."""

    numbers: np.ndarray
    positions: list[np.ndarray] = field(default_factory=list)
    max_forces: list[float] = field(default_factory=list)
    status: str = MAX_ITER

    @property
    def n_steps(self) -> int:
        return len(self.positions) - 1

    @property
    def final(self) -> AtomicSystem:
        return AtomicSystem(self.positions[-1], self.numbers)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def max_force(forces: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(forces, axis=1))) if len(forces) else 0.0


def _capped_step(forces: np.ndarray, config: RelaxConfig) -> np.ndarray:
    dx = config.step * forces
    norms = np.linalg.norm(dx, axis=1, keepdims=True)
    return dx * np.minimum(1.0, config.cap / np.maximum(norms, 1e-300))


def relax(system: AtomicSystem, force_fn: ForceFn, config: RelaxConfig | None = None) -> Trajectory:
    """Move atoms along the forces until the largest force norm is below ``fmax``.

    ``force_fn`` maps an :class:`AtomicSystem` to an ``(n, 3)`` array in
    eV/Å; a model and the oracle are interchangeable here. Non-finite forces
    stop the run and the partial trajectory is returned with that status.
    """
    return relax_many([system], lambda systems: [force_fn(s) for s in systems], config)[0]


def relax_many(
    systems: Sequence[AtomicSystem],
    force_fn: BatchForceFn,
    config: RelaxConfig | None = None,
) -> list[Trajectory]:
    """Relax several structures in lockstep, calling ``force_fn`` once per iteration.

    Each structure follows exactly the trajectory :func:`relax` would give it.
    """
    config = config or RelaxConfig()
    trajs = [Trajectory(s.numbers.copy(), [s.positions.copy()]) for s in systems]
    active = list(range(len(systems)))
    for it in range(config.max_iter + 1):
        if not active:
            break
        current = [AtomicSystem(trajs[i].positions[-1], trajs[i].numbers) for i in active]
        forces = force_fn(current)
        still = []
        for i, f in zip(active, forces):
            f = np.asarray(f, dtype=np.float64)
            traj = trajs[i]
            if not np.all(np.isfinite(f)):
                traj.status = NON_FINITE
                continue
            fm = max_force(f)
            traj.max_forces.append(fm)
            if fm < config.fmax:
                traj.status = CONVERGED
                continue
            if it == config.max_iter:
                traj.status = MAX_ITER
                continue
            traj.positions.append(traj.positions[-1] + _capped_step(f, config))
            still.append(i)
        active = still
    return trajs


# ---------------------------------------------------------------------------
# metrics


def adwt(predicted: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float:
    """Mean over distance thresholds of the fraction of atoms within the threshold."""
    dists = []
    for p, r in zip(predicted, reference, strict=True):
        p, r = np.asarray(p), np.asarray(r)
        if p.shape != r.shape:
            raise ValueError(f"atom count mismatch: {p.shape} vs {r.shape}")
        dists.append(np.linalg.norm(p - r, axis=1))
    if not dists:
        raise ValueError("no structures to compare")
    d = np.concatenate(dists)
    return float(np.mean([(d <= beta).mean() for beta in DISTANCE_THRESHOLDS]))


def afbt(max_forces: Sequence[float]) -> float:
    """Mean over force thresholds of the fraction of structures below the threshold."""
    f = np.asarray(max_forces, dtype=np.float64)
    if f.size == 0:
        raise ValueError("no structures to score")
    return float(np.mean([(f < t).mean() for t in FORCE_THRESHOLDS]))


def relaxation_metrics(
    predicted: Sequence[AtomicSystem],
    reference: Sequence[AtomicSystem],
    oracle_force_fn: ForceFn,
) -> tuple[float, float]:
    """``(ADwT-style, AFbT-style)`` of predicted relaxed structures.

    Distances are measured to the oracle-relaxed positions; forces are the
    oracle's at the predicted geometry.
    """
    if len(predicted) != len(reference):
        raise ValueError("predicted and reference lists differ in length")
    for p, r in zip(predicted, reference):
        if len(p) != len(r) or not np.array_equal(p.numbers, r.numbers):
            raise ValueError("predicted and reference structures differ in atoms")
    score_d = adwt([p.positions for p in predicted], [r.positions for r in reference])
    score_f = afbt([max_force(oracle_force_fn(p)) for p in predicted])
    return score_d, score_f


def write_trajectory(path, traj: Trajectory, energies: Sequence[float] | None = None) -> None:
    """One JSON object per frame: ``step``, ``positions`` and ``max_force`` when known."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": "spinconv-trajectory",
            "version": 1,
            "numbers": traj.numbers.tolist(),
            "status": traj.status,
            "n_frames": len(traj.positions),
        }
        fh.write(json.dumps(header) + "\n")
        for i, pos in enumerate(traj.positions):
            frame = {"step": i, "positions": pos.tolist()}
            if i < len(traj.max_forces):
                frame["max_force"] = traj.max_forces[i]
            if energies is not None:
                frame["energy"] = float(energies[i])
            fh.write(json.dumps(frame) + "\n")


def read_trajectory(path) -> Trajectory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trajectory file")
    header = json.loads(lines[0])
    traj = Trajectory(np.array(header["numbers"]), status=header["status"])
    for line in lines[1:]:
        frame = json.loads(line)
        traj.positions.append(np.array(frame["positions"], dtype=np.float64))
        if "max_force" in frame:
            traj.max_forces.append(frame["max_force"])
    if len(traj.positions) != header["n_frames"]:
        raise ValueError(f"{path}: expected {header['n_frames']} frames, found {len(traj.positions)}")
    return traj
