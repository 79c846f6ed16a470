import numpy as np
import pytest

from spinconv.data import OracleParams, generate_dataset, lj_energy, lj_energy_forces
from spinconv.geometry import AtomicSystem
from spinconv.relax import (
    CONVERGED,
    MAX_ITER,
    NON_FINITE,
    RelaxConfig,
    adwt,
    afbt,
    max_force,
    read_trajectory,
    relax,
    relax_many,
    relaxation_metrics,
    write_trajectory,
)

ORACLE = OracleParams()


def oracle_forces(system):
    return lj_energy_forces(system, ORACLE)[1]


def _dimer(r, z=6):
    return AtomicSystem([[0.0, 0.0, 0.0], [r, 0.0, 0.0]], [z, z])


def test_config_validation():
    with pytest.raises(ValueError):
        RelaxConfig(max_iter=0)
    with pytest.raises(ValueError):
        RelaxConfig(fmax=0.0)


def test_dimer_at_minimum_takes_no_steps():
    traj = relax(_dimer(ORACLE.r_min(6, 6)), oracle_forces)
    assert traj.status == CONVERGED and traj.n_steps == 0


def test_stretched_dimer_relaxes_to_minimum():
    r_min = ORACLE.r_min(6, 6)
    traj = relax(_dimer(1.3 * r_min), oracle_forces, RelaxConfig(max_iter=5000, fmax=1e-6))
    assert traj.converged
    r = np.linalg.norm(traj.positions[-1][1] - traj.positions[-1][0])
    assert abs(r - r_min) < 1e-3


def test_diverging_forces_stop_at_max_iter():
    push = lambda s: np.tile([1.0, 0.0, 0.0], (len(s), 1)) * (1.0 + np.abs(s.positions[:, :1]))
    traj = relax(_dimer(3.0), push, RelaxConfig(max_iter=17))
    assert traj.status == MAX_ITER
    assert traj.n_steps == 17


def test_non_finite_forces_return_partial_trajectory():
    calls = []

    def flaky(system):
        calls.append(1)
        return np.full((len(system), 3), np.nan) if len(calls) == 4 else np.ones((len(system), 3))

    traj = relax(_dimer(3.0), flaky)
    assert traj.status == NON_FINITE
    assert traj.n_steps == 3 and len(traj.max_forces) == 3


def test_displacement_is_capped():
    traj = relax(_dimer(3.0), lambda s: np.full((len(s), 3), 100.0), RelaxConfig(max_iter=2, cap=0.05))
    steps = np.linalg.norm(np.diff(np.array(traj.positions), axis=0), axis=2)
    np.testing.assert_allclose(steps, 0.05, atol=1e-15)


def test_oracle_energy_decreases_along_relaxations():
    records = generate_dataset(50, atoms_range=(4, 10), seed=21)
    systems = [AtomicSystem(r.positions, r.numbers) for r in records]
    trajs = relax_many(systems, lambda batch: [oracle_forces(s) for s in batch], RelaxConfig(max_iter=300))
    for traj in trajs:
        energies = [lj_energy(AtomicSystem(p, traj.numbers), ORACLE) for p in traj.positions]
        assert np.all(np.diff(energies) <= 1e-12)
    assert np.mean([t.converged for t in trajs]) >= 0.95


def test_relax_many_matches_single_relaxations(cluster):
    systems = [cluster, _dimer(3.4), AtomicSystem(cluster.positions * 1.2, cluster.numbers)]
    config = RelaxConfig(max_iter=40)
    many = relax_many(systems, lambda batch: [oracle_forces(s) for s in batch], config)
    for system, traj in zip(systems, many):
        single = relax(system, oracle_forces, config)
        assert single.status == traj.status
        np.testing.assert_array_equal(np.array(single.positions), np.array(traj.positions))


def test_model_and_oracle_are_interchangeable(force_net, cluster):
    traj = relax(cluster, force_net.forces, RelaxConfig(max_iter=3))
    assert traj.n_steps <= 3 and len(traj.max_forces) >= 1


# ---------------------------------------------------------------------------
# metrics


def test_adwt_examples(rng):
    ref = rng.normal(size=(6, 3))
    assert adwt([ref], [ref]) == 1.0
    assert adwt([ref + [1.0, 0.0, 0.0]], [ref]) == 0.0
    half = ref.copy()
    half[:3] += [0.0, 1.0, 0.0]
    assert adwt([half], [ref]) == 0.5


def test_adwt_atom_count_mismatch(rng):
    with pytest.raises(ValueError, match="mismatch"):
        adwt([rng.normal(size=(3, 3))], [rng.normal(size=(4, 3))])


def test_afbt_examples():
    assert afbt([0.0, 0.001]) == 1.0
    assert afbt([5.0]) == 0.0
    assert afbt([0.0, 5.0]) == 0.5


def test_relaxation_metrics_of_exact_minimum():
    system = _dimer(ORACLE.r_min(6, 6))
    assert relaxation_metrics([system], [system], oracle_forces) == (1.0, 1.0)
    with pytest.raises(ValueError):
        relaxation_metrics([system], [AtomicSystem(system.positions, [1, 1])], oracle_forces)


def test_max_force_is_per_atom_norm():
    assert max_force(np.array([[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]])) == 5.0


def test_trajectory_round_trip(cluster, tmp_path):
    traj = relax(cluster, oracle_forces, RelaxConfig(max_iter=5))
    path = tmp_path / "traj.jsonl"
    write_trajectory(path, traj)
    back = read_trajectory(path)
    assert back.status == traj.status
    np.testing.assert_array_equal(np.array(back.positions), np.array(traj.positions))
    assert back.max_forces == traj.max_forces
