"""Distance block, embedding block and the per-edge message update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spherical
from .autodiff import Tensor


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class Block:
    """Holds named parameter tensors; sub-blocks are flattened with dotted names."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Block):
                for sub, t in value.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, list) and value and isinstance(value[0], Block):
                for i, blk in enumerate(value):
                    for sub, t in blk.parameters().items():
                        out[f"{name}.{i}.{sub}"] = t
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters().items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape}, expected {t.shape}")
            t.data = value.copy()


class Linear(Block):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = _param(_glorot(rng, n_in, n_out))
        self.bias = _param(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class DistanceBlock(Block):
    """Gaussian expansion of a species-adjusted distance followed by a linear map.

    Means are evenly spaced on ``[0, cutoff]`` and the width is three times
    their spacing. Each ordered species pair learns a gain (init 1) and an
    offset (init 0) applied to the distance before expansion.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        n_species: int,
        out_dim: int,
        cutoff: float = 6.0,
        n_basis: int = 64,
    ):
        if n_basis < 2:
            raise ValueError("distance block needs at least two basis functions")
        self.means = np.linspace(0.0, cutoff, n_basis)
        self.sigma = 3.0 * (self.means[1] - self.means[0])
        self.gain = _param(np.ones(n_species * n_species))
        self.offset = _param(np.zeros(n_species * n_species))
        self.linear = Linear(rng, n_basis, out_dim)

    def basis(self, dist, pair_index: np.ndarray) -> Tensor:
        dist = ad.reshape(ad.as_tensor(dist), (-1, 1))
        gain = ad.reshape(ad.take(self.gain, pair_index), (-1, 1))
        offset = ad.reshape(ad.take(self.offset, pair_index), (-1, 1))
        return ad.gaussian(gain * dist + offset, self.means[None, :], self.sigma)

    def __call__(self, dist, pair_index: np.ndarray) -> Tensor:
        return self.linear(self.basis(dist, pair_index))


class EmbeddingBlock(Block):
    """Mixture of ``n_experts`` linear views of the input, weighted by species.

    With ``pair=True`` the mixing weights come from one-hot(source species)
    concatenated with one-hot(target species); otherwise from the target only.
    The weights are produced by a two-layer network (hidden width
    ``2 * n_experts``, Swish) and a softmax; a final linear layer maps the
    mixed ``hidden``-dimensional vector to ``out_dim``.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        n_species: int,
        in_dim: int,
        hidden: int,
        n_experts: int,
        out_dim: int,
        pair: bool = True,
    ):
        self.n_species = n_species
        self.in_dim = in_dim
        self.hidden = hidden
        self.n_experts = n_experts
        self.pair = pair
        self.experts = Linear(rng, in_dim, hidden * n_experts)
        n_onehot = 2 * n_species if pair else n_species
        self.species_in = Linear(rng, n_onehot, 2 * n_experts)
        self.species_out = Linear(rng, 2 * n_experts, n_experts)
        self.output = Linear(rng, hidden, out_dim)

    def _species_inputs(self) -> np.ndarray:
        eye = np.eye(self.n_species)
        if not self.pair:
            return eye
        # row a * S + b is onehot(a) ++ onehot(b)
        src = np.repeat(eye, self.n_species, axis=0)
        dst = np.tile(eye, (self.n_species, 1))
        return np.concatenate([src, dst], axis=1)

    def mixing_weights(self, species_index: np.ndarray) -> Tensor:
        """Softmax weights per row; ``species_index`` is a pair or target index."""
        hidden = ad.swish(self.species_in(self._species_inputs()))
        table = ad.softmax(self.species_out(hidden), axis=-1)
        return ad.take(table, species_index)

    def __call__(self, x, species_index: np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ad.ShapeError(
                f"embedding_block: input shape {x.shape}, expected (N, {self.in_dim})"
            )
        n = x.shape[0]
        views = ad.reshape(self.experts(x), (n, self.n_experts, self.hidden))
        weights = ad.reshape(self.mixing_weights(species_index), (n, self.n_experts, 1))
        mixed = ad.sum_(views * weights, axis=1)
        return self.output(mixed)


class SpinConvBlock(Block):
    """Spin convolution of a batch of grids followed by GroupNorm with affine terms."""

    def __init__(
        self,
        rng: np.random.Generator,
        n_lat: int,
        n_lon: int,
        m: int,
        d: int,
        group_size: int = 4,
    ):
        w, b = spherical.init_filters(rng, n_lat, n_lon, m, d)
        self.filters = _param(w)
        self.bias = _param(b)
        self.scale = _param(np.ones(d))
        self.shift = _param(np.zeros(d))
        self.group_size = min(group_size, d)

    def normalize(self, pooled: Tensor) -> Tensor:
        return ad.group_norm(pooled, self.group_size) * self.scale + self.shift

    def __call__(self, grids) -> Tensor:
        """Dense route: ``grids`` is ``(N, n_lat, n_lon, M)``."""
        return self.normalize(spherical.spin_convolution(grids, self.filters, self.bias, ad.swish))

    def from_plan(self, plan: spherical.SplatPlan, messages: Tensor) -> Tensor:
        """Sparse route over a precomputed splat plan; same result as the dense one."""
        return self.normalize(plan.convolve(messages, self.filters, self.bias, ad.swish))


@dataclass
class EdgeGeometry:
    """Everything the message update needs about the graph, computed once per pass.

    ``pair_edge[k]`` is the edge whose grid receives message ``pair_message[k]``
    at ``(phi[k], theta[k])``; ``plan`` is the matching sparse splat plan.
    """

    dist: Tensor
    edge_species: np.ndarray
    pair_edge: np.ndarray
    pair_message: np.ndarray
    phi: Tensor
    theta: Tensor
    n_edges: int
    plan: spherical.SplatPlan | None = None


class InitialMessage(Block):
    """``h0 = embedding(distance(d_st))`` projected to the message size."""

    def __init__(self, rng, n_species: int, m: int, d: int, b: int, cutoff: float, n_basis: int):
        self.distance = DistanceBlock(rng, n_species, d, cutoff, n_basis)
        self.embedding = EmbeddingBlock(rng, n_species, d, d, b, m, pair=True)

    def __call__(self, geom: EdgeGeometry) -> Tensor:
        return self.embedding(self.distance(geom.dist, geom.edge_species), geom.edge_species)


class MessageLayer(Block):
    """One residual update of every edge message.

    The edge's grid collects all messages arriving at its source atom; the
    spin-convolved descriptor goes through an embedding block, is added to a
    distance encoding, passed through Swish and a second embedding block that
    emits the message-sized increment.
    """

    def __init__(
        self,
        rng,
        n_species: int,
        m: int,
        d: int,
        b: int,
        n_lat: int,
        n_lon: int,
        cutoff: float,
        n_basis: int,
    ):
        self.n_lat = n_lat
        self.n_lon = n_lon
        self.conv = SpinConvBlock(rng, n_lat, n_lon, m, d)
        self.embed_conv = EmbeddingBlock(rng, n_species, d, d, b, d, pair=True)
        self.distance = DistanceBlock(rng, n_species, d, cutoff, n_basis)
        self.embed_out = EmbeddingBlock(rng, n_species, d, d, b, m, pair=True)

    def increment(self, h: Tensor, geom: EdgeGeometry, dense: bool = False) -> Tensor:
        if dense or geom.plan is None:
            grids = spherical.scatter_to_grids(
                geom.phi, geom.theta, geom.pair_edge, geom.pair_message, h,
                geom.n_edges, self.n_lat, self.n_lon,
            )
            conv = self.conv(grids)
        else:
            conv = self.conv.from_plan(geom.plan, h)
        x = self.embed_conv(conv, geom.edge_species)
        x = ad.swish(x + self.distance(geom.dist, geom.edge_species))
        return self.embed_out(x, geom.edge_species)

    def __call__(self, h: Tensor, geom: EdgeGeometry, dense: bool = False) -> Tensor:
        return h + self.increment(h, geom, dense)
