"""Synthetic reference data from a tapered Lennard-Jones potential.

Dataset files are JSON Lines. The first line is a header::

    {"schema": "spinconv-dataset", "version": 1, "n_records": N, "meta": {...}}

followed by ``N`` records::

    {"positions": [[x, y, z], ...],   # Å
     "numbers": [z, ...],
     "energy": E,                     # eV
     "forces": [[fx, fy, fz], ...],   # eV/Å
     "split": "id" | "ood"}

Floats are written with full round-trip precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from .geometry import AtomicSystem, pairwise_distances

SCHEMA = "spinconv-dataset"
SCHEMA_VERSION = 1
SPLIT_ID = "id"
SPLIT_OOD = "ood"

DEFAULT_EPSILON = {1: 0.10, 6: 0.30}  # eV
DEFAULT_SIGMA = {1: 2.0, 6: 2.6}  # Å


class CoreOverlapError(ValueError):
    """Two atoms are inside the repulsive core of the reference potential."""


class DatasetFormatError(ValueError):
    pass


@dataclass
class OracleParams:
    """Per-species Lennard-Jones parameters combined with Lorentz-Berthelot rules.

    ``pair_overrides`` maps a sorted species pair to an explicit ``(epsilon, sigma)``.
    """

    epsilon: dict = field(default_factory=lambda: dict(DEFAULT_EPSILON))
    sigma: dict = field(default_factory=lambda: dict(DEFAULT_SIGMA))
    cutoff: float = 5.0
    taper: float = 0.5
    pair_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.epsilon = {int(k): float(v) for k, v in self.epsilon.items()}
        self.sigma = {int(k): float(v) for k, v in self.sigma.items()}
        if any(v <= 0 for v in self.epsilon.values()) or any(v <= 0 for v in self.sigma.values()):
            raise ValueError("Lennard-Jones epsilon and sigma must be positive")
        if set(self.epsilon) != set(self.sigma):
            raise ValueError("epsilon and sigma must cover the same species")
        if not 0 < self.taper < self.cutoff:
            raise ValueError("taper width must lie in (0, cutoff)")

    def pair(self, a: int, b: int) -> tuple[float, float]:
        key = (min(a, b), max(a, b))
        if key in self.pair_overrides:
            eps, sig = self.pair_overrides[key]
            return float(eps), float(sig)
        try:
            eps = np.sqrt(self.epsilon[a] * self.epsilon[b])
            sig = 0.5 * (self.sigma[a] + self.sigma[b])
        except KeyError as exc:
            raise ValueError(f"no Lennard-Jones parameters for species {exc.args[0]}") from None
        return float(eps), float(sig)

    def pair_tables(self, numbers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(numbers)
        eps = np.empty((n, n))
        sig = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                eps[i, j], sig[i, j] = self.pair(int(numbers[i]), int(numbers[j]))
        return eps, sig

    def r_min(self, a: int, b: int) -> float:
        return 2.0 ** (1.0 / 6.0) * self.pair(a, b)[1]


def _taper(r: np.ndarray, r_on: float, r_off: float) -> tuple[np.ndarray, np.ndarray]:
    """C2 switching function and its derivative; 1 below ``r_on``, 0 above ``r_off``."""
    x = np.clip((r - r_on) / (r_off - r_on), 0.0, 1.0)
    s = 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x**2)
    ds = -30.0 * x**2 * (1.0 - x) ** 2 / (r_off - r_on)
    return s, ds


def lj_energy_forces(system: AtomicSystem, oracle: OracleParams) -> tuple[float, np.ndarray]:
    """Energy (eV) and analytic forces (eV/Å) of the tapered pair potential."""
    if len(system) == 1:
        return 0.0, np.zeros((1, 3))
    eps, sig = oracle.pair_tables(system.numbers)
    return _lj(system.positions, eps, sig, oracle.cutoff, oracle.taper)


def _lj(pos, eps, sig, cutoff, taper):
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(r, np.inf)
    if np.any(r < 0.3 * sig):
        i, j = np.unravel_index(np.argmin(r / sig), r.shape)
        raise CoreOverlapError(
            f"atoms {min(i, j)} and {max(i, j)} are {r[i, j]:.3g} Å apart, inside 0.3 sigma"
        )
    sr6 = (sig / r) ** 6
    v = 4.0 * eps * (sr6**2 - sr6)
    dv = 4.0 * eps * (-12.0 * sr6**2 + 6.0 * sr6) / r
    s, ds = _taper(r, cutoff - taper, cutoff)
    energy = float(np.sum(np.triu(v * s, 1)))
    dE_dr = dv * s + v * ds
    np.fill_diagonal(dE_dr, 0.0)
    # F_i = -sum_j dE/dr_ij * (x_i - x_j) / r_ij
    forces = -np.sum((dE_dr / r)[:, :, None] * diff, axis=1)
    return energy, forces


def lj_energy(system: AtomicSystem, oracle: OracleParams) -> float:
    return lj_energy_forces(system, oracle)[0]


def finite_difference_forces(energy_fn, positions: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """``-dE/dx`` by central differences; ``energy_fn`` maps positions to a float."""
    positions = np.array(positions, dtype=np.float64)
    out = np.zeros_like(positions)
    for idx in np.ndindex(positions.shape):
        plus = positions.copy()
        minus = positions.copy()
        plus[idx] += step
        minus[idx] -= step
        out[idx] = -(energy_fn(plus) - energy_fn(minus)) / (2.0 * step)
    return out


def oracle_force_check(system: AtomicSystem, oracle: OracleParams, step: float = 1e-5) -> float:
    """Largest |analytic - finite difference| force component, relative to the force scale."""
    _, analytic = lj_energy_forces(system, oracle)
    eps, sig = oracle.pair_tables(system.numbers)
    numeric = finite_difference_forces(
        lambda x: _lj(x, eps, sig, oracle.cutoff, oracle.taper)[0], system.positions, step
    )
    scale = max(np.max(np.abs(analytic)), 1.0)
    return float(np.max(np.abs(analytic - numeric)) / scale)


# ---------------------------------------------------------------------------
# records and files


@dataclass
class StructureRecord:
    positions: np.ndarray
    numbers: np.ndarray
    energy: float
    forces: np.ndarray
    split: str = SPLIT_ID

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.numbers = np.asarray(self.numbers, dtype=np.int64).reshape(-1)
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        self.energy = float(self.energy)
        if self.split not in (SPLIT_ID, SPLIT_OOD):
            raise ValueError(f"split must be {SPLIT_ID!r} or {SPLIT_OOD!r}, got {self.split!r}")
        if len(self.positions) != len(self.numbers) or len(self.forces) != len(self.numbers):
            raise ValueError("positions, numbers and forces disagree on the atom count")
        if not (
            np.isfinite(self.energy)
            and np.all(np.isfinite(self.positions))
            and np.all(np.isfinite(self.forces))
        ):
            raise ValueError("record contains NaN or Inf")

    def system(self) -> AtomicSystem:
        return AtomicSystem(self.positions, self.numbers, self.energy, self.forces)

    def to_json(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "numbers": self.numbers.tolist(),
            "energy": self.energy,
            "forces": self.forces.tolist(),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StructureRecord":
        missing = {"positions", "numbers", "energy", "forces", "split"} - obj.keys()
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        return cls(obj["positions"], obj["numbers"], obj["energy"], obj["forces"], obj["split"])


def write_dataset(path, records: Sequence[StructureRecord], meta: dict | None = None) -> None:
    header = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "n_records": len(records),
        "meta": meta or {},
    }
    lines = [json.dumps(header, sort_keys=True, allow_nan=False)]
    lines += [json.dumps(r.to_json(), allow_nan=False) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path, with_header: bool = False):
    """Records of a dataset file; malformed content raises ``DatasetFormatError``."""
    raw = Path(path).read_bytes()
    records: list[StructureRecord] = []
    header = None
    offset = 0
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            obj = json.loads(line.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DatasetFormatError(
                f"{path}: line {lineno} (byte offset {start}) is not valid JSON: {exc}"
            ) from None
        if header is None:
            if obj.get("schema") != SCHEMA:
                raise DatasetFormatError(f"{path}: line 1 is not a {SCHEMA} header")
            if obj.get("version") != SCHEMA_VERSION:
                raise DatasetFormatError(f"{path}: unsupported version {obj.get('version')}")
            header = obj
            continue
        try:
            records.append(StructureRecord.from_json(obj))
        except (ValueError, TypeError) as exc:
            raise DatasetFormatError(
                f"{path}: line {lineno} (byte offset {start}): {exc}"
            ) from None
    if header is None:
        raise DatasetFormatError(f"{path}: empty file (byte offset 0)")
    if len(records) != header["n_records"]:
        raise DatasetFormatError(
            f"{path}: truncated at byte offset {len(raw)}: header promises "
            f"{header['n_records']} records, found {len(records)}"
        )
    return (records, header) if with_header else records


# ---------------------------------------------------------------------------
# generation


def _relax_oracle(pos, numbers, oracle, max_iter=200):
    """Local minimum of the oracle near ``pos`` (L-BFGS)."""
    pos = np.array(pos, dtype=np.float64)
    eps, sig = oracle.pair_tables(numbers)

    def fun(x):
        e, f = _lj(x.reshape(-1, 3), eps, sig, oracle.cutoff, oracle.taper)
        return e, -f.ravel()

    result = optimize.minimize(
        fun, pos.ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": 1e-4},
    )
    return result.x.reshape(-1, 3)


def species_pairs(numbers: Iterable[int]) -> set:
    zs = sorted(set(int(z) for z in numbers))
    pairs = set()
    counts = {z: list(numbers).count(z) for z in zs}
    for a, b in combinations_with_replacement(zs, 2):
        if a != b or counts[a] > 1:
            pairs.add((a, b))
    return pairs


def ood_pairs(species: Sequence[int], fraction: float, rng: np.random.Generator) -> set:
    """Held-out species pairs: a ``fraction`` of the heteronuclear pairs (at least one)."""
    hetero = [(a, b) for a, b in combinations_with_replacement(sorted(species), 2) if a != b]
    if fraction <= 0 or not hetero:
        return set()
    k = max(1, int(round(fraction * len(hetero))))
    chosen = rng.choice(len(hetero), size=k, replace=False)
    return {hetero[i] for i in sorted(chosen)}


def draw_composition(rng, n: int, species, held_out: set, ood: bool) -> np.ndarray:
    """Atomic numbers for ``n`` atoms with (``ood``) or without a held-out pair."""
    numbers: list[int] = []
    if ood:
        a, b = sorted(held_out)[rng.integers(len(held_out))]
        numbers = [a, b] + [int(z) for z in rng.choice(species, size=n - 2)]
        return np.array(rng.permutation(numbers))
    for _ in range(n):
        present = set(numbers)
        allowed = [
            z for z in species
            if not any((min(z, p), max(z, p)) in held_out for p in present if p != z)
        ]
        numbers.append(int(rng.choice(allowed)))
    return np.array(numbers)


def _sample_cluster(n, numbers, oracle, rng, max_tries=200):
    radius = 1.2 * n ** (1.0 / 3.0) + 0.8
    for _ in range(max_tries):
        pos = []
        for z in numbers:
            for _ in range(200):
                p = rng.uniform(-radius, radius, size=3)
                if np.linalg.norm(p) > radius:
                    continue
                ok = all(
                    np.linalg.norm(p - q) > 0.9 * oracle.pair(int(z), int(zq))[1]
                    for q, zq in zip(pos, numbers)
                )
                if ok:
                    pos.append(p)
                    break
            else:
                break
        if len(pos) == n:
            return np.array(pos)
    raise RuntimeError(f"could not place {n} atoms without overlap after {max_tries} tries")


def generate_structure(
    rng: np.random.Generator,
    n_atoms: int,
    numbers: np.ndarray,
    oracle: OracleParams,
    noise: float = 0.08,
    max_span: float | None = None,
    max_tries: int = 50,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Relaxed cluster plus Gaussian displacements.

    With ``max_span`` set, clusters whose largest pair distance exceeds it are redrawn.
    """
    for _ in range(max_tries):
        pos = _sample_cluster(n_atoms, numbers, oracle, rng)
        try:
            pos = _relax_oracle(pos, numbers, oracle)
            pos = pos + rng.normal(0.0, noise, size=pos.shape)
            pos -= pos.mean(axis=0)
            if max_span is not None and pairwise_distances(pos).max() > max_span:
                continue
            energy, forces = lj_energy_forces(AtomicSystem(pos, numbers), oracle)
        except CoreOverlapError:
            continue
        return pos, energy, forces
    raise RuntimeError("could not generate a compact cluster; relax the constraints")


def generate_dataset(
    n_structures: int,
    atoms_range: tuple[int, int] = (4, 10),
    species: Sequence[int] = (1, 6),
    seed: int = 0,
    ood_fraction: float = 0.2,
    oracle: OracleParams | None = None,
    noise: float = 0.08,
    check_tolerance: float = 1e-8,
) -> list[StructureRecord]:
    """Seeded list of labelled clusters.

    Structures tagged OOD contain at least one held-out species pair; ID
    structures contain none. Every record's forces are checked against
    central differences of the energy before it is accepted.
    """
    lo, hi = atoms_range
    if lo < 2 or hi < lo:
        raise ValueError("atoms_range must satisfy 2 <= lo <= hi")
    if not 0.0 <= ood_fraction < 1.0:
        raise ValueError("ood_fraction must lie in [0, 1)")
    oracle = oracle or OracleParams()
    rng = np.random.default_rng(seed)
    species = [int(z) for z in species]
    held_out = ood_pairs(species, ood_fraction, rng)
    records = []
    for _ in range(n_structures):
        want_ood = bool(held_out) and rng.random() < ood_fraction
        n = int(rng.integers(lo, hi + 1))
        numbers = draw_composition(rng, n, species, held_out, want_ood)
        pos, energy, forces = generate_structure(rng, n, numbers, oracle, noise)
        rec = StructureRecord(pos, numbers, energy, forces, SPLIT_OOD if want_ood else SPLIT_ID)
        err = oracle_force_check(rec.system(), oracle)
        if err > check_tolerance:
            raise RuntimeError(f"oracle force self-check failed (error {err:.3g})")
        records.append(rec)
    return records


def dataset_statistics(records: Sequence[StructureRecord]) -> dict:
    """Median energy and median force component (x, y, z) over all atoms."""
    energies = np.array([r.energy for r in records])
    forces = np.concatenate([r.forces for r in records])
    return {
        "n_records": len(records),
        "median_energy": float(np.median(energies)),
        "median_force": [float(v) for v in np.median(forces, axis=0)],
    }


def split_records(records, split: str):
    return [r for r in records if r.split == split]


def train_val_split(records, val_fraction: float = 0.1, seed: int = 0):
    """Deterministic shuffle and split of ``records``."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(records))
    n_val = max(1, int(round(val_fraction * len(records)))) if records else 0
    return [records[i] for i in idx[n_val:]], [records[i] for i in idx[:n_val]]
