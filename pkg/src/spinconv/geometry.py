"""Atomic systems, neighbor graphs, per-edge reference frames and polar projection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MIN_SEPARATION = 0.1  # Å
MAX_ATOMIC_NUMBER = 100
# Above this |x̂·ẑ| the frame is built against world x instead of world z.
FRAME_FALLBACK = 0.999
# Projections closer than this to the z axis count as sitting on a pole.
POLE_TOLERANCE = 1e-12


@dataclass
class AtomicSystem:
    """Positions (Å) and atomic numbers, with optional reference labels."""

    positions: np.ndarray
    numbers: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.numbers = np.array(self.numbers, dtype=np.int64).reshape(-1)
        n = len(self.numbers)
        if n < 1:
            raise ValueError("AtomicSystem needs at least one atom")
        if self.positions.shape != (n, 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match {n} atomic numbers"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain NaN or Inf")
        if np.any(self.numbers < 1) or np.any(self.numbers > MAX_ATOMIC_NUMBER):
            raise ValueError(f"atomic numbers must lie in [1, {MAX_ATOMIC_NUMBER}]")
        if n > 1:
            d = pairwise_distances(self.positions)
            d[np.diag_indices(n)] = np.inf
            if d.min() < MIN_SEPARATION:
                i, j = np.unravel_index(np.argmin(d), d.shape)
                raise ValueError(
                    f"atoms {i} and {j} are {d[i, j]:.3g} Å apart (< {MIN_SEPARATION} Å)"
                )
        if self.forces is not None:
            self.forces = np.array(self.forces, dtype=np.float64).reshape(n, 3)
        if self.energy is not None:
            self.energy = float(self.energy)

    def __len__(self) -> int:
        return len(self.numbers)

    def with_positions(self, positions: np.ndarray) -> "AtomicSystem":
        return AtomicSystem(positions, self.numbers.copy())


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass
class NeighborGraph:
    """Directed edges ``s -> t`` grouped by target.

    ``unit[e] = (x_s - x_t) / d_st`` for edge ``e = (src[e], dst[e])``.
    """

    src: np.ndarray
    dst: np.ndarray
    distances: np.ndarray
    unit: np.ndarray
    n_atoms: int
    isolated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def neighbors(self, t: int) -> np.ndarray:
        return self.src[self.dst == t]


def build_neighbor_graph(
    system: AtomicSystem, cutoff: float = 6.0, max_neighbors: int = 30
) -> NeighborGraph:
    """All sources within ``cutoff`` of each target, keeping the nearest ``max_neighbors``.

    Ties in distance go to the lower source index.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be at least 1")
    pos = system.positions
    n = len(system)
    d = pairwise_distances(pos)
    src, dst = [], []
    for t in range(n):
        cand = np.flatnonzero((d[:, t] < cutoff) & (np.arange(n) != t))
        order = np.lexsort((cand, d[cand, t]))
        chosen = cand[order][:max_neighbors]
        src.extend(chosen)
        dst.extend([t] * len(chosen))
    src = np.array(src, dtype=np.int64)
    dst = np.array(dst, dtype=np.int64)
    offsets = pos[src] - pos[dst]
    dist = np.sqrt(np.sum(offsets**2, axis=1))
    unit = offsets / dist[:, None] if len(src) else np.zeros((0, 3))
    isolated = np.bincount(dst, minlength=n) == 0
    return NeighborGraph(src, dst, dist, unit, n, isolated)


def edge_frame(unit: np.ndarray) -> np.ndarray:
    """Rotation ``R`` with ``R @ unit = (0, 0, 1)`` and a canonical roll."""
    u = np.asarray(unit, dtype=np.float64)
    length = np.linalg.norm(u)
    if abs(length - 1.0) > 1e-6:
        raise ValueError(f"edge_frame needs a unit vector, got norm {length}")
    u = u / length
    ref = np.array([0.0, 0.0, 1.0])
    if abs(u @ ref) > FRAME_FALLBACK:
        ref = np.array([1.0, 0.0, 0.0])
    x = ref - (ref @ u) * u
    x /= np.linalg.norm(x)
    y = np.cross(u, x)
    return np.stack([x, y, u])


def project_to_sphere(frame: np.ndarray, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Latitude ``phi`` in [0, pi] and longitude ``theta`` in [0, 2 pi) in ``frame``.

    ``theta`` is 0 at the poles.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    local = v @ np.asarray(frame).T
    rho = np.hypot(local[:, 0], local[:, 1])
    phi = np.arctan2(rho, local[:, 2])
    theta = np.where(rho > POLE_TOLERANCE, np.arctan2(local[:, 1], local[:, 0]), 0.0)
    theta = np.where(theta < 0.0, theta + 2.0 * np.pi, theta)
    theta = np.where(theta >= 2.0 * np.pi, 0.0, theta)
    return phi, theta


# ---------------------------------------------------------------------------
# differentiable versions used inside the network


def edge_vectors(positions: Tensor, src: np.ndarray, dst: np.ndarray):
    """Distances and unit offsets of edges as tensors of ``positions``."""
    offsets = ad.take(positions, src) - ad.take(positions, dst)
    dist = ad.norm(offsets, axis=1)
    unit = offsets / ad.reshape(dist, (-1, 1))
    return dist, unit


def edge_frames(unit: Tensor) -> Tensor:
    """Stack of frames, shape ``(E, 3, 3)``, rows ``(x', y', z')``; differentiable."""
    n = unit.shape[0]
    use_x = np.abs(unit.data[:, 2]) > FRAME_FALLBACK
    ref = np.zeros((n, 3))
    ref[~use_x, 2] = 1.0
    ref[use_x, 0] = 1.0
    along = ad.sum_(unit * ref, axis=1, keepdims=True)
    x = ref - along * unit
    x = x / ad.norm(x, axis=1, keepdims=True)
    y = cross(unit, x)
    return ad.stack([x, y, unit], axis=1)


def cross(a: Tensor, b: Tensor) -> Tensor:
    a0, a1, a2 = a[:, 0], a[:, 1], a[:, 2]
    b0, b1, b2 = b[:, 0], b[:, 1], b[:, 2]
    return ad.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=1)


def polar_angles(local: Tensor) -> tuple[Tensor, Tensor]:
    """``(phi, theta)`` of already-rotated vectors, shape ``(P, 3)``."""
    lx, ly, lz = local[:, 0], local[:, 1], local[:, 2]
    rho = ad.norm(local[:, :2], axis=1)
    phi = ad.atan2(rho, lz)
    theta = ad.atan2(ly, lx)
    theta = theta + 2.0 * np.pi * (theta.data < 0.0)
    return phi, theta
