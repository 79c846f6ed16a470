"""Invariant and gradient checks that hold for any parameter values.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs the
suite on a freshly initialised model and is what ``spinconv check`` calls.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import autodiff as ad
from . import spherical
from .autodiff import Tensor
from .geometry import FRAME_FALLBACK, AtomicSystem, pairwise_distances
from .model import (
    ENERGY_CENTRIC,
    FORCE_CENTRIC,
    ModelConfig,
    SpinConvNet,
    edge_geometry,
    make_batch,
    random_rotations,
    refine_longitude,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name}: {self.value:.3g} (threshold {self.threshold:.3g}){extra}"


# ---------------------------------------------------------------------------
# test configurations


def projection_margin(system: AtomicSystem, config: ModelConfig) -> float:
    """Distance (rad or Å) of the configuration to the nearest non-smooth point.

    Counts grid lines of the bilinear splat (latitude in rad, longitude as
    arc length on the unit sphere), the frame fallback switch and the
    neighbor cutoff. Larger is smoother.
    """
    batch = make_batch([system], config)
    if batch.n_edges == 0:
        return np.inf
    geom, unit = edge_geometry(batch, ad.as_tensor(batch.positions), config)
    # reverse-message projections come last and sit exactly on the pole
    n_live = int((~batch.reverse).sum())
    phi = geom.phi.data[:n_live]
    theta = geom.theta.data[:n_live]
    margins = [np.inf]
    if len(phi):
        lat = np.arange(config.n_lat) * np.pi / (config.n_lat - 1)
        lon = np.arange(config.n_lon + 1) * 2.0 * np.pi / config.n_lon
        d_phi = np.min(np.abs(phi[:, None] - lat[None, :]), axis=1)
        d_theta = np.min(np.abs(theta[:, None] - lon[None, :]), axis=1) * np.sin(phi)
        margins += [d_phi.min(), d_theta.min()]
    margins.append(np.min(np.abs(np.abs(unit.data[:, 2]) - FRAME_FALLBACK)))
    d = pairwise_distances(system.positions)[np.triu_indices(len(system), 1)]
    margins.append(np.min(np.abs(d - config.cutoff)))
    return float(min(margins))


def smooth_systems(
    rng: np.random.Generator,
    count: int,
    config: ModelConfig,
    atoms_range: tuple[int, int] = (4, 8),
    margin: float = 1e-3,
    min_distance: float = 1.0,
    radius: float = 1.8,
) -> list[AtomicSystem]:
    """Random compact clusters at least ``margin`` away from every kink."""
    out = []
    species = list(config.species)
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise RuntimeError("could not draw smooth configurations; lower the margin")
        n = int(rng.integers(atoms_range[0], atoms_range[1] + 1))
        pos = rng.uniform(-radius, radius, size=(n, 3))
        d = pairwise_distances(pos)[np.triu_indices(n, 1)]
        if d.min() < min_distance or d.max() > config.cutoff - 1.0:
            continue
        system = AtomicSystem(pos, rng.choice(species, size=n))
        if projection_margin(system, config) > margin:
            out.append(system)
    return out


# ---------------------------------------------------------------------------
# gradients


def _energies_and_forces(net: SpinConvNet, systems: Sequence[AtomicSystem]):
    batch = make_batch(systems, net.config)
    tracked = Tensor(batch.positions, requires_grad=True)
    h, _, _ = net.messages(batch, tracked)
    energies = net.energies(batch, h)
    (g,) = ad.grad(ad.sum_(energies), [tracked])
    return energies.data.copy(), -g, batch


def batched_energies(net: SpinConvNet, systems: Sequence[AtomicSystem], chunk: int = 200) -> np.ndarray:
    out = []
    for start in range(0, len(systems), chunk):
        batch = make_batch(systems[start : start + chunk], net.config)
        out.append(net.forward(batch, forces=False)[0].data)
    return np.concatenate(out)


def check_force_gradients(
    net: SpinConvNet,
    systems: Sequence[AtomicSystem],
    step: float = 1e-4,
    tolerance: float = 1e-5,
) -> CheckResult:
    """``-dE/dx`` by backpropagation against central differences of E."""
    worst = 0.0
    for system in systems:
        _, forces, _ = _energies_and_forces(net, [system])
        shifted = []
        for idx in np.ndindex(system.positions.shape):
            for sign in (1.0, -1.0):
                pos = system.positions.copy()
                pos[idx] += sign * step
                shifted.append(AtomicSystem(pos, system.numbers))
        e = batched_energies(net, shifted).reshape(-1, 2)
        numeric = -(e[:, 0] - e[:, 1]).reshape(system.positions.shape) / (2.0 * step)
        err = np.max(np.abs(forces - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
        worst = max(worst, float(err))
    return CheckResult("force gradient vs finite differences", worst < tolerance, worst, tolerance,
                       f"{len(systems)} systems")


def random_path(rng: np.random.Generator, system: AtomicSystem, amplitude: float = 0.3):
    """Smooth closed-form path ``x(l), dx/dl`` for ``l`` in [0, 1]."""
    a = rng.normal(0.0, amplitude, size=system.positions.shape)
    b = rng.normal(0.0, amplitude, size=system.positions.shape)
    x0 = system.positions

    def path(lam):
        lam = np.asarray(lam, dtype=np.float64)[:, None, None]
        x = x0 + lam * a + np.sin(np.pi * lam) * b
        dx = a + np.pi * np.cos(np.pi * lam) * b
        return x, dx

    return path


def path_is_clean(net: SpinConvNet, system: AtomicSystem, positions: np.ndarray) -> bool:
    """True when no edge along the path crosses the cutoff or the frame fallback switch."""
    c = net.config
    n = len(system)
    iu = np.triu_indices(n, 1)
    diff = positions[:, iu[0], :] - positions[:, iu[1], :]
    d = np.linalg.norm(diff, axis=2)
    if np.any(d < 0.5):
        return False
    inside = d < c.cutoff
    if not np.all(inside == inside[0]):
        return False
    uz = np.abs(diff[:, :, 2]) / d
    above = uz > FRAME_FALLBACK
    return bool(np.all(above == above[0]))


def check_energy_conservation(
    net: SpinConvNet,
    systems: Sequence[AtomicSystem],
    rng: np.random.Generator,
    n_points: int = 1000,
    tolerance: float = 1e-3,
) -> CheckResult:
    """Line integral ``E(x1) - E(x0) + int f . dx`` relative to the energy variation.

    The denominator is ``int |f . dx|`` along the path, the total energy
    change if every bit of work had the same sign.
    """
    lam = np.linspace(0.0, 1.0, n_points)
    worst = 0.0
    used = 0
    for system in systems:
        for _ in range(50):
            path = random_path(rng, system)
            x, dx = path(lam)
            if path_is_clean(net, system, x):
                break
        else:
            continue
        used += 1
        frames = [AtomicSystem(p, system.numbers) for p in x]
        energies, powers = [], []
        for start in range(0, n_points, 100):
            e, f, batch = _energies_and_forces(net, frames[start : start + 100])
            energies.append(e)
            p = np.sum(f * dx[start : start + 100].reshape(-1, 3), axis=1)
            powers.append(np.bincount(batch.system, weights=p, minlength=batch.n_systems))
        energies = np.concatenate(energies)
        power = np.concatenate(powers)
        work = trapezoid(power, lam)
        scale = max(trapezoid(np.abs(power), lam), abs(energies[-1] - energies[0]), 1e-12)
        err = abs(energies[-1] - energies[0] + work) / scale
        worst = max(worst, float(err))
    passed = worst < tolerance and used == len(systems)
    return CheckResult("energy conservation along paths", passed, worst, tolerance,
                       f"{used}/{len(systems)} paths")


# ---------------------------------------------------------------------------
# symmetry


def _relative(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-12)


def check_translation(net: SpinConvNet, systems, rng, tolerance: float = 1e-10) -> CheckResult:
    worst = 0.0
    for s in systems:
        moved = AtomicSystem(s.positions + rng.normal(0.0, 3.0, size=3), s.numbers)
        worst = max(worst, abs(net.energy(moved) - net.energy(s)))
    return CheckResult("translation invariance of E", worst < tolerance, worst, tolerance)


def check_permutation(net: SpinConvNet, systems, rng, tolerance: float = 1e-10) -> CheckResult:
    worst = 0.0
    for s in systems:
        p = rng.permutation(len(s))
        worst = max(worst, abs(net.energy(AtomicSystem(s.positions[p], s.numbers[p])) - net.energy(s)))
    return CheckResult("permutation invariance of E", worst < tolerance, worst, tolerance)


def rotation_errors(net: SpinConvNet, systems, rotations: np.ndarray) -> np.ndarray:
    """``|E(Qx) - E(x)| / |E(x)|`` for every system and rotation, shape ``(S, R)``."""
    out = []
    for s in systems:
        rotated = [AtomicSystem(s.positions @ q.T, s.numbers) for q in rotations]
        e = batched_energies(net, [s] + rotated)
        out.append(np.abs(e[1:] - e[0]) / max(abs(e[0]), 1e-12))
    return np.array(out)


def check_rotation(
    net: SpinConvNet,
    systems,
    rng,
    n_rotations: int = 50,
    tolerance: float = 1e-2,
) -> list[CheckResult]:
    """Rotation error of E, then of the same network on a twice finer longitude grid."""
    rotations = random_rotations(rng, n_rotations)
    coarse = rotation_errors(net, systems, rotations)
    fine_net = refine_longitude(net, 2)
    fine = rotation_errors(fine_net, systems, rotations)
    worst = float(coarse.max())
    n_lon = net.config.n_lon
    return [
        CheckResult(f"rotation invariance of E (n_lon={n_lon})", worst < tolerance, worst,
                    tolerance, f"{len(systems)} systems x {n_rotations} rotations"),
        CheckResult(f"rotation error shrinks at n_lon={2 * n_lon}",
                    bool(fine.mean() < coarse.mean()), float(fine.mean()), float(coarse.mean()),
                    "mean relative error; threshold is the coarse-grid mean"),
    ]


def check_force_equivariance(net: SpinConvNet, systems, rng) -> CheckResult:
    """``|Q f(x) - f(Qx)| / |f|`` for the force head; reported, not bounded."""
    errs = []
    for s in systems:
        q = random_rotations(rng, 1)[0]
        f = net.forces(s)
        fr = net.forces(AtomicSystem(s.positions @ q.T, s.numbers))
        errs.append(np.linalg.norm(f @ q.T - fr) / max(np.linalg.norm(f), 1e-12))
    value = float(np.mean(errs))
    return CheckResult("force rotation equivariance error (reported)", True, value, np.inf)


# ---------------------------------------------------------------------------
# spin convolution


def check_roll_invariance(rng, n_lat=12, n_lon=16, m=3, d=8, tolerance=1e-12) -> CheckResult:
    grids = rng.normal(size=(4, n_lat, n_lon, m))
    filters, bias = spherical.init_filters(rng, n_lat, n_lon, m, d)
    bias = rng.normal(size=d)
    base = spherical.spin_convolution(grids, filters, bias).data
    worst = 0.0
    for k in range(1, n_lon):
        shifted = spherical.spin_convolution(np.roll(grids, k, axis=2), filters, bias).data
        worst = max(worst, float(np.max(np.abs(shifted - base))))
    return CheckResult("spin convolution roll invariance", worst < tolerance, worst, tolerance)


def check_shift_equivariance(rng, n_lat=12, n_lon=16, m=3, d=8, tolerance=1e-12) -> CheckResult:
    """Rolling the grid by ``k`` cells rolls the pre-pool correlation map by ``k``."""
    grids = rng.normal(size=(2, n_lat, n_lon, m))
    filters = rng.normal(size=(n_lat, n_lon, m, d))
    bias = rng.normal(size=d)
    base = spherical.spin_correlation(grids, filters, bias).data
    worst = 0.0
    for k in range(1, n_lon):
        shifted = spherical.spin_correlation(np.roll(grids, k, axis=2), filters, bias).data
        worst = max(worst, float(np.max(np.abs(shifted - np.roll(base, k, axis=1)))))
    return CheckResult("spin correlation shift equivariance", worst < tolerance, worst, tolerance)


def check_identity_collapse(rng, n_lat=12, n_lon=16, m=3, d=8, tolerance=1e-10) -> CheckResult:
    """Without a nonlinearity the pooled output only sees longitude-summed grid and filter.

    ``mean_k sum grid[:, j+k] w[:, j] = (1/n_lon) sum_i (sum_j grid[i, j]) . (sum_j w[i, j])``.
    """
    grids = rng.normal(size=(3, n_lat, n_lon, m))
    filters = rng.normal(size=(n_lat, n_lon, m, d))
    bias = rng.normal(size=d)
    pooled = spherical.spin_convolution(grids, filters, bias, activation=None).data
    predicted = np.einsum("nim,imd->nd", grids.sum(axis=2), filters.sum(axis=1)) / n_lon + bias
    err = float(np.max(np.abs(pooled - predicted)))
    return CheckResult("identity-activation collapse", err < tolerance, err, tolerance)


def check_primitives(rng, n_points: int = 100, tolerance: float = 1e-6) -> CheckResult:
    """Backpropagated gradients of the smooth primitives against central differences."""
    programs: dict[str, Callable] = {
        "swish": lambda x: ad.sum_(ad.swish(x)),
        "sigmoid": lambda x: ad.sum_(ad.sigmoid(x)),
        "exp": lambda x: ad.sum_(ad.exp(x * 0.3)),
        "softmax": lambda x: ad.sum_(ad.softmax(x) * np.arange(1.0, 5.0)),
        "gaussian": lambda x: ad.sum_(ad.gaussian(x, 0.2, 0.7)),
        "norm": lambda x: ad.norm(x + 3.0, axis=0),
        "roll_stack": lambda x: ad.sum_(ad.roll_stack(x, axis=0) * np.arange(16.0).reshape(4, 4)),
    }
    weights = rng.normal(size=(2, 16))
    grouped = {
        "group_norm": lambda x: ad.sum_(ad.group_norm(ad.reshape(x, (2, 16)), 4) * weights),
    }
    worst = 0.0
    failed = []
    for name, program in programs.items():
        for _ in range(n_points):
            x = rng.normal(size=4)
            report = ad.gradient_check(program, [x], step=1e-5, tolerance=tolerance)
            err = max(report.max_rel_error)
            worst = max(worst, err)
            if not report.passed:
                failed.append(name)
                break
    for name, program in grouped.items():
        for _ in range(n_points):
            report = ad.gradient_check(program, [rng.normal(size=32)], step=1e-5, tolerance=tolerance)
            worst = max(worst, max(report.max_rel_error))
            if not report.passed:
                failed.append(name)
                break
    detail = f"failed: {', '.join(failed)}" if failed else f"{len(programs) + len(grouped)} primitives"
    return CheckResult("primitive gradients", not failed, worst, tolerance, detail)


# ---------------------------------------------------------------------------
# suite


def run_checks(
    config: ModelConfig | None = None,
    seed: int = 0,
    n_systems: int = 5,
    n_rotations: int = 20,
    n_paths: int = 3,
    n_points: int = 1000,
) -> list[CheckResult]:
    """Every invariant on a freshly initialised model of each variant."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    energy_config = replace(config, variant=ENERGY_CENTRIC, seed=seed)
    force_config = replace(config, variant=FORCE_CENTRIC, seed=seed)
    energy_net = SpinConvNet(energy_config)
    force_net = SpinConvNet(force_config)
    systems = smooth_systems(rng, n_systems, energy_config)
    results = [
        check_primitives(rng, n_points=20),
        check_roll_invariance(rng),
        check_shift_equivariance(rng),
        check_identity_collapse(rng),
        check_translation(energy_net, systems, rng),
        check_permutation(energy_net, systems, rng),
        check_force_gradients(energy_net, systems[:2]),
        check_energy_conservation(energy_net, systems[:n_paths], rng, n_points=n_points),
    ]
    results += check_rotation(energy_net, systems, rng, n_rotations=n_rotations)
    results.append(check_force_equivariance(force_net, systems[:2], rng))
    return results
