"""Grid-based spherical representation and the spin convolution.

A grid has ``n_lat`` latitude rows with nodes at ``i * pi / (n_lat - 1)`` (both
poles included) and ``n_lon`` periodic longitude columns at ``j * 2 pi / n_lon``.
Messages are splatted onto the four surrounding nodes with bilinear weights.
All nodes of a pole row describe the same point on the sphere, so whatever
weight lands on a pole row is spread evenly over its columns; this keeps the
representation independent of the (undefined) longitude at the poles.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _check_grid(n_lat: int, n_lon: int) -> None:
    if n_lat < 2 or n_lon < 2:
        raise ValueError(f"grid needs at least 2x2 cells, got {n_lat}x{n_lon}")


def bilinear_weights(phi, theta, n_lat: int, n_lon: int) -> tuple[Tensor, np.ndarray]:
    """Splat weights of points ``(phi, theta)`` onto a ``n_lat x n_lon`` grid.

    Returns ``(values, cells)``, both of shape ``(P, 2, n_lon)``: for each point
    the two bracketing latitude rows and a weight for every column of each row.
    ``cells`` holds flattened ``row * n_lon + column`` indices. Weights of one
    point sum to 1.
    """
    _check_grid(n_lat, n_lon)
    phi, theta = ad.as_tensor(phi), ad.as_tensor(theta)
    d_phi = np.pi / (n_lat - 1)
    d_theta = 2.0 * np.pi / n_lon

    u = phi / d_phi
    row0 = np.clip(np.floor(u.data), 0, n_lat - 2).astype(np.intp)
    f_phi = u - row0
    v = theta / d_theta
    col_floor = np.floor(v.data)
    f_theta = v - col_floor
    col0 = col_floor.astype(np.intp) % n_lon
    col1 = (col0 + 1) % n_lon

    columns = np.arange(n_lon)
    hot0 = (columns[None, :] == col0[:, None]).astype(np.float64)
    hot1 = (columns[None, :] == col1[:, None]).astype(np.float64)
    ft = ad.reshape(f_theta, (-1, 1))
    interior = (1.0 - ft) * hot0 + ft * hot1

    rows = np.stack([row0, row0 + 1], axis=1)
    pole = (rows == 0) | (rows == n_lat - 1)
    uniform = np.full((1, n_lon), 1.0 / n_lon)
    col_w0 = ad.where(pole[:, :1], uniform, interior)
    col_w1 = ad.where(pole[:, 1:], uniform, interior)
    fp = ad.reshape(f_phi, (-1, 1))
    values = ad.stack([(1.0 - fp) * col_w0, fp * col_w1], axis=1)
    cells = rows[:, :, None] * n_lon + columns[None, None, :]
    return values, cells


def scatter_to_grids(
    phi,
    theta,
    grid_index: np.ndarray,
    message_index: np.ndarray,
    messages,
    n_grids: int,
    n_lat: int,
    n_lon: int,
) -> Tensor:
    """Add ``messages[message_index[k]]`` at ``(phi[k], theta[k])`` of grid ``grid_index[k]``.

    Returns a tensor of shape ``(n_grids, n_lat, n_lon, M)``.
    """
    messages = ad.as_tensor(messages)
    m = messages.shape[1]
    if len(grid_index) == 0:
        zero = ad.as_tensor(np.zeros((n_grids, n_lat, n_lon, m)))
        return ad.mul(zero, ad.sum_(messages)) if messages.requires_grad else zero
    values, cells = bilinear_weights(phi, theta, n_lat, n_lon)
    per_point = cells.shape[1] * cells.shape[2]
    rows = (np.asarray(grid_index)[:, None, None] * (n_lat * n_lon) + cells).reshape(-1)
    cols = np.repeat(np.asarray(message_index), per_point)
    flat = ad.sparse_matmul(
        ad.reshape(values, (-1,)), rows, cols, n_grids * n_lat * n_lon, messages
    )
    return ad.reshape(flat, (n_grids, n_lat, n_lon, m))


def scatter_messages(phi, theta, messages, n_lat: int, n_lon: int) -> Tensor:
    """Single grid of shape ``(n_lat, n_lon, M)`` holding all projected messages."""
    messages = ad.as_tensor(np.atleast_2d(messages) if not isinstance(messages, Tensor) else messages)
    phi = ad.as_tensor(np.atleast_1d(phi) if not isinstance(phi, Tensor) else phi)
    theta = ad.as_tensor(np.atleast_1d(theta) if not isinstance(theta, Tensor) else theta)
    n = messages.shape[0]
    grid = scatter_to_grids(
        phi, theta, np.zeros(n, dtype=np.intp), np.arange(n), messages, 1, n_lat, n_lon
    )
    return ad.reshape(grid, grid.shape[1:])


def spin_correlation(grids, filters, bias) -> Tensor:
    """Correlate each grid with every filter at all longitudinal shifts.

    ``grids`` is ``(N, n_lat, n_lon, M)``, ``filters`` is ``(n_lat, n_lon, M, D)``
    and ``bias`` is ``(D,)``. Returns ``(N, n_lon, D)`` where entry ``[n, s, d]``
    is the full inner product of grid ``n`` rolled by ``s`` columns with filter
    ``d``, plus bias.
    """
    grids, filters, bias = ad.as_tensor(grids), ad.as_tensor(filters), ad.as_tensor(bias)
    if grids.ndim != 4 or filters.ndim != 4 or grids.shape[1:] != filters.shape[:3]:
        raise ad.ShapeError(
            f"spin_convolution: grid shape {grids.shape} does not match filter shape {filters.shape}"
        )
    n, n_lat, n_lon, m = grids.shape
    d = filters.shape[3]
    if bias.shape != (d,):
        raise ad.ShapeError(f"spin_convolution: bias shape {bias.shape}, expected ({d},)")
    # rolled[s, p, c, m, d] = filters[p, (c - s) % n_lon, m, d]
    rolled = ad.roll_stack(filters, axis=1)
    mat = ad.reshape(ad.transpose(rolled, (1, 2, 3, 0, 4)), (n_lat * n_lon * m, n_lon * d))
    conv = ad.matmul(ad.reshape(grids, (n, n_lat * n_lon * m)), mat)
    return ad.reshape(conv, (n, n_lon, d)) + bias


def spin_convolution(
    grids,
    filters,
    bias,
    activation: Callable[[Tensor], Tensor] | None = ad.swish,
) -> Tensor:
    """Roll-invariant descriptor of each grid: correlate, activate, average over shifts.

    Accepts a single grid ``(n_lat, n_lon, M)`` or a batch ``(N, n_lat, n_lon, M)``.
    ``activation=None`` means identity.
    """
    grids = ad.as_tensor(grids)
    single = grids.ndim == 3
    if single:
        grids = ad.reshape(grids, (1,) + grids.shape)
    out = spin_correlation(grids, filters, bias)
    if activation is not None:
        out = activation(out)
    pooled = ad.mean(out, axis=1)
    return ad.reshape(pooled, pooled.shape[1:]) if single else pooled


def init_filters(rng: np.random.Generator, n_lat: int, n_lon: int, m: int, d: int):
    """Random full-coverage filters and zero biases."""
    _check_grid(n_lat, n_lon)
    scale = 1.0 / np.sqrt(n_lat * n_lon * m / 4.0)
    return rng.normal(0.0, scale, size=(n_lat, n_lon, m, d)), np.zeros(d)


class SplatPlan:
    """Sparse form of "scatter onto grids, then correlate over all shifts".

    Built once from the projected angles and reused for every layer that
    shares the same geometry. Each point contributes four entries (two
    bracketing latitude rows times two longitude nodes); on a pole row a
    single entry refers to the longitude-averaged filter instead.
    """

    def __init__(
        self,
        phi,
        theta,
        grid_index: np.ndarray,
        message_index: np.ndarray,
        n_grids: int,
        n_lat: int,
        n_lon: int,
    ):
        _check_grid(n_lat, n_lon)
        phi, theta = ad.as_tensor(phi), ad.as_tensor(theta)
        self.n_grids, self.n_lat, self.n_lon = n_grids, n_lat, n_lon
        grid_index = np.asarray(grid_index, dtype=np.intp)
        message_index = np.asarray(message_index, dtype=np.intp)
        n_points = len(grid_index)
        self.n_points = n_points
        if n_points == 0:
            self.values = None
            return

        d_phi = np.pi / (n_lat - 1)
        d_theta = 2.0 * np.pi / n_lon
        u = phi / d_phi
        row0 = np.clip(np.floor(u.data), 0, n_lat - 2).astype(np.intp)
        f_phi = ad.reshape(u - row0, (-1, 1, 1))
        v = theta / d_theta
        col_floor = np.floor(v.data)
        f_theta = ad.reshape(v - col_floor, (-1, 1, 1))
        col0 = col_floor.astype(np.intp) % n_lon

        rows = np.stack([row0, row0 + 1], axis=1)  # (P, 2)
        pole = (rows == 0) | (rows == n_lat - 1)
        row_w = ad.concatenate([1.0 - f_phi, f_phi], axis=1)  # (P, 2, 1)
        col_w = ad.concatenate([1.0 - f_theta, f_theta], axis=2)  # (P, 1, 2)
        # pole rows: whole row weight on slot 0, slot 1 unused
        pole_w = np.broadcast_to(np.array([1.0, 0.0]), (n_points, 2, 2))
        col_w = ad.where(pole[:, :, None], pole_w, col_w)
        self.values = ad.reshape(row_w * col_w, (-1,))  # (P * 4,)

        cols = np.stack([col0, (col0 + 1) % n_lon], axis=1)  # (P, 2)
        slot = rows[:, :, None] * n_lon + cols[:, None, :]  # (P, 2, 2)
        pole_slot = n_lat * n_lon + (rows == n_lat - 1).astype(np.intp)
        self._pole = np.broadcast_to(pole[:, :, None], slot.shape).reshape(-1)
        self._row = np.broadcast_to((rows * n_lon)[:, :, None], slot.shape).reshape(-1)
        self._col = np.broadcast_to(cols[:, None, :], slot.shape).reshape(-1)
        self._pole_slot = np.broadcast_to(pole_slot[:, :, None], slot.shape).reshape(-1)
        self._grid = np.repeat(grid_index, 4)

        # expand every interior entry over the n_lon shifts; pole entries do
        # not depend on the shift and go through a separate, narrower matrix
        inner = ~self._pole
        shifts = np.arange(n_lon)
        col_shifted = (self._col[inner, None] - shifts[None, :]) % n_lon
        per_message = n_lat * n_lon
        self.inner_cols = (
            (np.repeat(message_index, 4)[inner] * per_message + self._row[inner])[:, None]
            + col_shifted
        ).reshape(-1)
        self.inner_rows = (self._grid[inner, None] * n_lon + shifts[None, :]).reshape(-1)
        inner_idx = np.flatnonzero(inner)
        self.inner_values = ad.reshape(
            ad.reshape(ad.take(self.values, inner_idx), (-1, 1)) * np.ones((1, n_lon)), (-1,)
        )
        pole_idx = np.flatnonzero(self._pole)
        self.pole_cols = np.repeat(message_index, 4)[pole_idx] * 2 + (
            self._pole_slot[pole_idx] - n_lat * n_lon
        )
        self.pole_rows = self._grid[pole_idx]
        self.pole_values = ad.take(self.values, pole_idx)

    def correlate(self, messages, filters, bias) -> Tensor:
        """Same result as ``spin_correlation(scatter_to_grids(...), filters, bias)``."""
        messages, filters, bias = ad.as_tensor(messages), ad.as_tensor(filters), ad.as_tensor(bias)
        n_lat, n_lon = self.n_lat, self.n_lon
        m = messages.shape[1]
        if filters.shape[:3] != (n_lat, n_lon, m):
            raise ad.ShapeError(
                f"spin_convolution: filter shape {filters.shape} does not match grid "
                f"({n_lat}, {n_lon}, {m})"
            )
        d = filters.shape[3]
        if self.n_points == 0:
            zero = np.zeros((self.n_grids, n_lon, d))
            return ad.as_tensor(zero) + bias
        # per-message response of every filter cell: (n_msg, n_lat, n_lon, d)
        w = ad.reshape(ad.transpose(filters, (2, 0, 1, 3)), (m, n_lat * n_lon * d))
        pole_filters = ad.mean(ad.stack([filters[0], filters[n_lat - 1]], axis=0), axis=1)
        pole_w = ad.reshape(ad.transpose(pole_filters, (1, 0, 2)), (m, 2 * d))
        resp = ad.reshape(ad.matmul(messages, w), (-1, n_lat * n_lon, d))
        poles = ad.reshape(ad.matmul(messages, pole_w), (-1, 2, d))
        out = ad.sparse_matmul(
            self.inner_values, self.inner_rows, self.inner_cols, self.n_grids * n_lon,
            ad.reshape(resp, (-1, d)),
        )
        out = ad.reshape(out, (self.n_grids, n_lon, d))
        pole_out = ad.sparse_matmul(
            self.pole_values, self.pole_rows, self.pole_cols, self.n_grids,
            ad.reshape(poles, (-1, d)),
        )
        return out + ad.reshape(pole_out, (self.n_grids, 1, d)) + bias

    def convolve(self, messages, filters, bias, activation=ad.swish) -> Tensor:
        out = self.correlate(messages, filters, bias)
        if activation is not None:
            out = activation(out)
        return ad.mean(out, axis=1)
