"""SpinConv network: energy head and the two force heads."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry, spherical
from .autodiff import Tensor
from .blocks import Block, EdgeGeometry, EmbeddingBlock, InitialMessage, MessageLayer, SpinConvBlock
from .geometry import AtomicSystem

ENERGY_CENTRIC = "energy-centric"
FORCE_CENTRIC = "force-centric"
CHECKPOINT_FORMAT = "spinconv-checkpoint"
CHECKPOINT_VERSION = 1

# Rotations taking world x, y, z (in that order) onto +z; each is a cyclic
# permutation of the axes, so all have determinant +1.
AXIS_FRAMES = np.array(
    [
        [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
        [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    ]
)


@dataclass
class ModelConfig:
    species: tuple = (1, 6)
    m: int = 8  # message size
    k: int = 3  # message layers
    d: int = 32  # hidden size
    b: int = 4  # embedding experts
    n_lat: int = 12
    n_lon: int = 16
    cutoff: float = 6.0  # Å
    max_neighbors: int = 30
    n_basis: int = 64
    variant: str = FORCE_CENTRIC
    rotation_samples: int = 5
    seed: int = 0

    def __post_init__(self):
        self.species = tuple(int(z) for z in self.species)
        self.validate()

    def validate(self) -> None:
        for name in ("m", "d", "b", "n_basis", "max_neighbors", "rotation_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.n_lat < 2 or self.n_lon < 2:
            raise ValueError("grid needs n_lat >= 2 and n_lon >= 2")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.variant not in (ENERGY_CENTRIC, FORCE_CENTRIC):
            raise ValueError(f"variant must be {ENERGY_CENTRIC!r} or {FORCE_CENTRIC!r}")
        if not self.species or len(set(self.species)) != len(self.species):
            raise ValueError("species must be a non-empty list of distinct atomic numbers")
        if any(z < 1 or z > geometry.MAX_ATOMIC_NUMBER for z in self.species):
            raise ValueError("species must be atomic numbers in [1, 100]")
        group = min(4, self.d)
        if self.d % group:
            raise ValueError("d must be a multiple of the GroupNorm group size 4")


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` rotation matrices uniform on SO(3), from normalised Gaussian quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


@dataclass
class Batch:
    """Several systems merged into one disconnected graph."""

    positions: np.ndarray
    species: np.ndarray  # index into ModelConfig.species per atom
    system: np.ndarray  # owning system per atom
    n_systems: int
    src: np.ndarray
    dst: np.ndarray
    pair_edge: np.ndarray = field(repr=False)
    pair_message: np.ndarray = field(repr=False)
    reverse: np.ndarray = field(repr=False)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def make_batch(systems: Sequence[AtomicSystem], config: ModelConfig) -> Batch:
    lookup = {z: i for i, z in enumerate(config.species)}
    positions, species, owner, src, dst = [], [], [], [], []
    offset = 0
    for i, system in enumerate(systems):
        unknown = set(system.numbers.tolist()) - lookup.keys()
        if unknown:
            raise ValueError(f"atomic numbers {sorted(unknown)} are not in the model species {config.species}")
        graph = geometry.build_neighbor_graph(system, config.cutoff, config.max_neighbors)
        positions.append(system.positions)
        species.append([lookup[z] for z in system.numbers])
        owner.append(np.full(len(system), i))
        src.append(graph.src + offset)
        dst.append(graph.dst + offset)
        offset += len(system)
    src = np.concatenate(src).astype(np.intp)
    dst = np.concatenate(dst).astype(np.intp)
    n_atoms = offset

    # every edge s->t receives all messages s'->s arriving at its source
    incoming = np.argsort(dst, kind="stable")
    starts = np.searchsorted(dst[incoming], np.arange(n_atoms + 1))
    counts = np.diff(starts)[src]
    pair_edge = np.repeat(np.arange(len(src)), counts)
    first = np.repeat(starts[src], counts)
    within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    pair_message = incoming[first + within]
    reverse = src[pair_message] == dst[pair_edge]
    return Batch(
        positions=np.concatenate(positions),
        species=np.concatenate(species).astype(np.intp),
        system=np.concatenate(owner).astype(np.intp),
        n_systems=len(systems),
        src=src,
        dst=dst,
        pair_edge=pair_edge.astype(np.intp),
        pair_message=pair_message.astype(np.intp),
        reverse=reverse,
    )


def edge_geometry(batch: Batch, positions: Tensor, config: ModelConfig) -> tuple[EdgeGeometry, Tensor]:
    """Distances, per-edge projections and the sparse splat plan; also returns the unit vectors."""
    n_species = len(config.species)
    dist, unit = geometry.edge_vectors(positions, batch.src, batch.dst)
    frames = geometry.edge_frames(unit)
    live = ~batch.reverse
    e_live = batch.pair_edge[live]
    m_live = batch.pair_message[live]
    # local = R_e @ unit_{e'}
    local = ad.sum_(
        ad.take(frames, e_live) * ad.reshape(ad.take(unit, m_live), (-1, 1, 3)), axis=2
    )
    phi, theta = geometry.polar_angles(local)
    n_rev = int(batch.reverse.sum())
    # the target atom itself always sits exactly on the south pole
    phi = ad.concatenate([phi, np.full(n_rev, np.pi)])
    theta = ad.concatenate([theta, np.zeros(n_rev)])
    pair_edge = np.concatenate([e_live, batch.pair_edge[batch.reverse]])
    pair_message = np.concatenate([m_live, batch.pair_message[batch.reverse]])
    c = config
    geom = EdgeGeometry(
        dist=dist,
        edge_species=batch.species[batch.src] * n_species + batch.species[batch.dst],
        pair_edge=pair_edge,
        pair_message=pair_message,
        phi=phi,
        theta=theta,
        n_edges=batch.n_edges,
        plan=spherical.SplatPlan(
            phi, theta, pair_edge, pair_message, batch.n_edges, c.n_lat, c.n_lon
        ),
    )
    return geom, unit


class SpinConvNet(Block):
    """Parameters and forward computation of one model variant."""

    def __init__(self, config: ModelConfig):
        c = config
        self.config = c
        rng = np.random.default_rng(c.seed)
        n_s = len(c.species)
        self.initial = InitialMessage(rng, n_s, c.m, c.d, c.b, c.cutoff, c.n_basis)
        self.layers = [
            MessageLayer(rng, n_s, c.m, c.d, c.b, c.n_lat, c.n_lon, c.cutoff, c.n_basis)
            for _ in range(c.k)
        ]
        self.energy_head = EmbeddingBlock(rng, n_s, c.m, c.d, c.b, 1, pair=False)
        if c.variant == FORCE_CENTRIC:
            self.force_conv = SpinConvBlock(rng, c.n_lat, c.n_lon, c.m, c.d)
            self.force_embed = EmbeddingBlock(rng, n_s, c.d, c.d, c.b, c.d, pair=False)
            self.force_out = EmbeddingBlock(rng, n_s, c.d, c.d, c.b, 1, pair=False)

    # -- geometry ----------------------------------------------------------

    def edge_geometry(self, batch: Batch, positions: Tensor) -> tuple[EdgeGeometry, Tensor]:
        return edge_geometry(batch, positions, self.config)

    # -- forward -----------------------------------------------------------

    def messages(
        self, batch: Batch, positions: Tensor, n_layers: int | None = None, dense: bool = False
    ):
        """Final edge messages, the edge geometry and the edge unit vectors.

        ``dense=True`` builds explicit grids instead of using the sparse plan.
        """
        geom, unit = self.edge_geometry(batch, positions)
        h = self.initial(geom)
        for layer in self.layers[: self.config.k if n_layers is None else n_layers]:
            h = layer(h, geom, dense)
        return h, geom, unit

    def energies(self, batch: Batch, h: Tensor) -> Tensor:
        """Energy per system from the final messages."""
        per_atom_msg = ad.segment_sum(h, batch.dst, batch.n_atoms)
        per_atom = self.energy_head(per_atom_msg, batch.species)
        return ad.segment_sum(ad.reshape(per_atom, (-1,)), batch.system, batch.n_systems)

    def force_block(
        self, batch: Batch, h: Tensor, unit: Tensor, frames: np.ndarray, dense: bool = False
    ) -> Tensor:
        """Scalar force-block output per (frame, atom), shape ``(F, n_atoms)``.

        ``frames[f]`` rotates world vectors so the sphere axis becomes +z. Each
        atom's sphere holds the messages arriving at it, placed at the
        directions of their source atoms.
        """
        c = self.config
        n_frames = len(frames)
        n, e = batch.n_atoms, batch.n_edges
        stacked = np.concatenate([f.T for f in frames], axis=1)  # (3, 3F)
        local = ad.reshape(ad.matmul(unit, stacked), (e, n_frames, 3))
        local = ad.reshape(ad.transpose(local, (1, 0, 2)), (n_frames * e, 3))
        phi, theta = geometry.polar_angles(local)
        sphere = (np.arange(n_frames)[:, None] * n + batch.dst[None, :]).reshape(-1)
        message = np.tile(np.arange(e), n_frames)
        if dense:
            grids = spherical.scatter_to_grids(
                phi, theta, sphere, message, h, n_frames * n, c.n_lat, c.n_lon
            )
            conv = self.force_conv(grids)
        else:
            plan = spherical.SplatPlan(phi, theta, sphere, message, n_frames * n, c.n_lat, c.n_lon)
            conv = self.force_conv.from_plan(plan, h)
        target = np.tile(batch.species, n_frames)
        x = ad.swish(self.force_embed(conv, target))
        out = self.force_out(x, target)
        return ad.reshape(out, (n_frames, n))

    def direct_forces(self, batch: Batch, h: Tensor, unit: Tensor, rotations: np.ndarray) -> Tensor:
        """Force-centric forces averaged over ``rotations`` (each ``(3, 3)``)."""
        rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        r = len(rotations)
        frames = np.einsum("iab,rbc->riac", AXIS_FRAMES, rotations).reshape(-1, 3, 3)
        out = ad.reshape(self.force_block(batch, h, unit, frames), (r, 3, batch.n_atoms))
        # rotate each estimate back: f = Q^T f'
        rotated = ad.matmul(ad.transpose(out, (0, 2, 1)), rotations)
        return ad.mean(rotated, axis=0)

    def forward(
        self,
        batch: Batch,
        positions: Tensor | None = None,
        rotations: np.ndarray | None = None,
        forces: bool = True,
    ) -> tuple[Tensor, Tensor | None]:
        """Energies ``(n_systems,)`` and forces ``(n_atoms, 3)``.

        For the energy-centric variant the forces are the negative position
        gradient and come back as a constant tensor; the force-centric variant
        returns differentiable forces from the force block.
        """
        c = self.config
        if positions is None:
            positions = ad.as_tensor(batch.positions)
        if forces and c.variant == ENERGY_CENTRIC:
            tracked = Tensor(positions.data, requires_grad=True)
            h, _, _ = self.messages(batch, tracked)
            energies = self.energies(batch, h)
            (g,) = ad.grad(ad.sum_(energies), [tracked])
            return energies, ad.as_tensor(-g)
        h, _, unit = self.messages(batch, positions)
        energies = self.energies(batch, h)
        if not forces:
            return energies, None
        if rotations is None:
            rotations = random_rotations(np.random.default_rng(c.seed), c.rotation_samples)
        return energies, self.direct_forces(batch, h, unit, rotations)

    # -- convenience -------------------------------------------------------

    def energy(self, system: AtomicSystem) -> float:
        batch = make_batch([system], self.config)
        energies, _ = self.forward(batch, forces=False)
        return float(energies.data[0])

    def forces(self, system: AtomicSystem, rotations: np.ndarray | None = None) -> np.ndarray:
        batch = make_batch([system], self.config)
        _, f = self.forward(batch, rotations=rotations)
        return f.data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}


def refine_longitude(net: SpinConvNet, factor: int = 2) -> SpinConvNet:
    """Same network on a grid with ``factor`` times more longitude cells.

    Filters are resampled by periodic linear interpolation. A bilinear splat
    correlated with a filter equals the messages weighted by the filter's
    piecewise-linear interpolant, and midpoint insertion leaves that
    interpolant unchanged, so only the sampling of the roll shifts differs.
    """
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    config = replace(net.config, n_lon=net.config.n_lon * factor)
    out = SpinConvNet(config)
    arrays = {}
    for name, value in net.state_dict().items():
        if name.endswith("filters"):
            value = _upsample_longitude(value, factor)
        arrays[name] = value
    out.load(arrays)
    return out


def _upsample_longitude(filters: np.ndarray, factor: int) -> np.ndarray:
    n_lon = filters.shape[1]
    nxt = np.roll(filters, -1, axis=1)
    parts = [filters + (nxt - filters) * (j / factor) for j in range(factor)]
    stacked = np.stack(parts, axis=2)  # (lat, lon, factor, ...)
    return stacked.reshape(filters.shape[0], n_lon * factor, *filters.shape[2:])


# ---------------------------------------------------------------------------
# functional entry points


def energy(system: AtomicSystem, net: SpinConvNet) -> float:
    return net.energy(system)


def forces_energy_centric(system: AtomicSystem, net: SpinConvNet) -> np.ndarray:
    """``-dE/dx`` by backpropagation through the whole network."""
    batch = make_batch([system], net.config)
    positions = Tensor(batch.positions, requires_grad=True)
    h, _, _ = net.messages(batch, positions)
    total = ad.sum_(net.energies(batch, h))
    (g,) = ad.grad(total, [positions])
    return -g


def forces_force_centric(
    system: AtomicSystem,
    net: SpinConvNet,
    rotation_samples: int | None = None,
    rng: np.random.Generator | None = None,
    rotations: np.ndarray | None = None,
) -> np.ndarray:
    if not hasattr(net, "force_conv"):
        raise ValueError("the energy-centric variant has no force block")
    if rotations is None:
        n = net.config.rotation_samples if rotation_samples is None else rotation_samples
        if n < 1:
            raise ValueError("rotation_samples must be at least 1")
        rng = np.random.default_rng(net.config.seed) if rng is None else rng
        rotations = random_rotations(rng, n)
    batch = make_batch([system], net.config)
    h, _, unit = net.messages(batch, ad.as_tensor(batch.positions))
    return net.direct_forces(batch, h, unit, rotations).data.copy()


def force_block(system: AtomicSystem, net: SpinConvNet, axis) -> np.ndarray:
    """Force-block output of every atom with the sphere pointed along ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ValueError("axis must be a unit vector")
    batch = make_batch([system], net.config)
    h, _, unit = net.messages(batch, ad.as_tensor(batch.positions))
    frame = geometry.edge_frame(axis)
    return net.force_block(batch, h, unit, frame[None])[0].data.copy()


# ---------------------------------------------------------------------------
# checkpoints


def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def save_checkpoint(net: SpinConvNet, path, extra: dict | None = None) -> None:
    """Write config and parameters as JSON; arrays are base64 little-endian float64."""
    config = asdict(net.config)
    config["species"] = list(config["species"])
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "parameters": {k: _encode(v) for k, v in net.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path) -> SpinConvNet:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a spinconv checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in payload["config"].items() if k in known})
    net = SpinConvNet(config)
    net.load({k: _decode(v) for k, v in payload["parameters"].items()})
    return net
