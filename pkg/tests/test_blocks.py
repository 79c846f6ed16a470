from dataclasses import replace

import numpy as np
import pytest

from reference_model import tiny_instance_errors
from spinconv import autodiff as ad
from spinconv.blocks import DistanceBlock, EmbeddingBlock, SpinConvBlock
from spinconv.checks import smooth_systems
from spinconv.geometry import AtomicSystem
from spinconv.model import SpinConvNet, make_batch, random_rotations


@pytest.fixture
def distance_block(rng):
    return DistanceBlock(rng, 2, 4, cutoff=6.0, n_basis=64)


def test_distance_block_layout(distance_block):
    mu = distance_block.means
    assert np.all(np.diff(mu) > 0) and mu[0] == 0.0 and mu[-1] == 6.0
    assert distance_block.sigma == pytest.approx(3 * (mu[1] - mu[0]), abs=1e-15)
    np.testing.assert_array_equal(distance_block.gain.data, 1.0)
    np.testing.assert_array_equal(distance_block.offset.data, 0.0)


def test_distance_basis_at_mean_and_one_sigma(distance_block):
    i = 17
    mu, sigma = distance_block.means[i], distance_block.sigma
    b = distance_block.basis(np.array([mu, mu + sigma]), np.array([0, 3])).data
    assert b[0, i] == 1.0
    assert b[1, i] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert b[1, i] == pytest.approx(0.60653, abs=1e-5)


def test_distance_basis_far_outside(distance_block):
    # exp(-r^2 / 2 sigma^2) < 1e-4 needs r > sqrt(2 ln 1e4) sigma ~ 4.29 sigma
    sigma = distance_block.sigma
    far = np.array([6.0 + 4.5 * sigma, -4.5 * sigma, 50.0])
    assert np.all(distance_block.basis(far, np.zeros(3, dtype=int)).data < 1e-4)
    edge = distance_block.basis(np.array([6.0 + 3 * sigma]), np.zeros(1, dtype=int)).data
    assert edge.max() == pytest.approx(np.exp(-4.5), rel=1e-12)


def test_embedding_single_expert_reduces_to_linear(rng):
    blk = EmbeddingBlock(rng, 2, 3, 5, 1, 4, pair=True)
    x = rng.normal(size=(6, 3))
    idx = rng.integers(0, 4, 6)
    np.testing.assert_array_equal(blk.mixing_weights(idx).data, 1.0)
    expected = (x @ blk.experts.weight.data + blk.experts.bias.data) @ blk.output.weight.data + blk.output.bias.data
    np.testing.assert_allclose(blk(x, idx).data, expected, atol=1e-14)


def test_embedding_same_species_same_weights(rng):
    blk = EmbeddingBlock(rng, 3, 4, 4, 3, 2, pair=True)
    w = blk.mixing_weights(np.array([5, 1, 5])).data
    np.testing.assert_array_equal(w[0], w[2])
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)


def test_embedding_hand_set_equal_logits():
    blk = EmbeddingBlock(np.random.default_rng(0), 1, 2, 1, 2, 1, pair=False)
    blk.load({
        "experts.weight": np.array([[1.0, 2.0], [3.0, 4.0]]),
        "experts.bias": np.zeros(2),
        "species_in.weight": np.ones((1, 4)),
        "species_in.bias": np.zeros(4),
        "species_out.weight": np.zeros((4, 2)),
        "species_out.bias": np.zeros(2),
        "output.weight": np.array([[2.0]]),
        "output.bias": np.array([0.5]),
    })
    # views = [1+3, 2+4] = [4, 6]; equal weights average to 5; 2 * 5 + 0.5
    assert blk(np.array([[1.0, 1.0]]), np.array([0])).item() == 10.5


def test_embedding_dimension_mismatch(rng):
    blk = EmbeddingBlock(rng, 2, 3, 4, 2, 2)
    with pytest.raises(ad.ShapeError, match="embedding_block"):
        blk(np.zeros((2, 4)), np.array([0, 1]))


def test_zero_grid_through_spin_block(rng):
    blk = SpinConvBlock(rng, 6, 8, 3, 8)
    blk.bias.data = rng.normal(size=8)
    out = blk(np.zeros((1, 6, 8, 3))).data[0]
    pooled = blk.bias.data / (1 + np.exp(-blk.bias.data))
    g = pooled.reshape(2, 4)
    expected = ((g - g.mean(1, keepdims=True)) / np.sqrt(g.var(1, keepdims=True) + 1e-5)).reshape(-1)
    np.testing.assert_allclose(out, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# messages


def _messages(net, system, n_layers=None, dense=False):
    batch = make_batch([system], net.config)
    h, _, _ = net.messages(batch, ad.as_tensor(batch.positions), n_layers, dense)
    return h.data, batch


def test_identical_edges_identical_initial_messages(energy_net):
    h, _ = _messages(energy_net, AtomicSystem([[0, 0, 0], [1.7, 0.4, -0.2]], [6, 6]), 0)
    np.testing.assert_array_equal(h[0], h[1])


def test_no_edges_gives_empty_state(energy_net):
    h, _ = _messages(energy_net, AtomicSystem([[0, 0, 0]], [1]))
    assert h.shape == (0, energy_net.config.m)


def test_translated_initial_messages_bitwise(energy_net, cluster):
    pos = np.round(cluster.positions * 1024) / 1024
    a, _ = _messages(energy_net, AtomicSystem(pos, cluster.numbers), 0)
    b, _ = _messages(energy_net, AtomicSystem(pos + [2.5, -0.75, 1.0], cluster.numbers), 0)
    np.testing.assert_array_equal(a, b)


def test_dimer_update_is_well_defined(energy_net):
    # each source's grid holds only the reverse message
    h, _ = _messages(energy_net, AtomicSystem([[0, 0, 0], [0.3, 1.2, 2.0]], [1, 6]))
    assert np.all(np.isfinite(h))


def test_k_zero_keeps_initial_state(small_config, cluster):
    net0 = SpinConvNet(replace(small_config, k=0))
    h, batch = _messages(net0, cluster)
    h0, _ = _messages(net0, cluster, 0)
    np.testing.assert_array_equal(h, h0)
    energy = net0.energies(batch, ad.as_tensor(h)).item()
    assert energy == net0.energy(cluster)


def test_residual_with_zero_output_layer(small_config, cluster):
    net = SpinConvNet(small_config)
    layer = net.layers[0]
    layer.embed_out.output.weight.data = np.zeros_like(layer.embed_out.output.weight.data)
    layer.embed_out.output.bias.data = np.zeros_like(layer.embed_out.output.bias.data)
    h0, _ = _messages(net, cluster, 0)
    h1, _ = _messages(net, cluster, 1)
    np.testing.assert_array_equal(h0, h1)


def test_dense_and_sparse_routes_agree(energy_net, cluster):
    a, _ = _messages(energy_net, cluster)
    b, _ = _messages(energy_net, cluster, dense=True)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_tiny_instance_matches_loop_reference():
    for seed in range(3):
        errors = tiny_instance_errors(seed)
        assert max(errors.values()) < 1e-12, errors


def test_messages_permute_with_atoms(energy_net, cluster, rng):
    perm = rng.permutation(len(cluster))
    a, ba = _messages(energy_net, cluster)
    b, bb = _messages(energy_net, AtomicSystem(cluster.positions[perm], cluster.numbers[perm]))
    lookup = {(s, t): i for i, (s, t) in enumerate(zip(ba.src, ba.dst))}
    order = [lookup[(perm[s], perm[t])] for s, t in zip(bb.src, bb.dst)]
    np.testing.assert_array_equal(b, a[order])


def test_messages_nearly_rotation_invariant(energy_net, cluster, rng):
    a, _ = _messages(energy_net, cluster)
    for q in random_rotations(rng, 5):
        b, _ = _messages(energy_net, AtomicSystem(cluster.positions @ q.T, cluster.numbers))
        assert np.linalg.norm(b - a) / np.linalg.norm(a) < 0.05


def test_message_gradient_wrt_positions(energy_net, rng):
    system = smooth_systems(rng, 1, energy_net.config, atoms_range=(4, 5))[0]
    batch = make_batch([system], energy_net.config)
    w = rng.normal(size=(batch.n_edges, energy_net.config.m))

    def program(pos):
        h, _, _ = energy_net.messages(batch, pos)
        return ad.sum_(h * w)

    report = ad.gradient_check(program, [system.positions], step=1e-5, tolerance=1e-5)
    assert report.passed, report.max_rel_error
