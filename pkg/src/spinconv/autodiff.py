"""Small reverse-mode automatic differentiation engine over float64 arrays.

Every quantity in the network, including atom positions, can be wrapped in a
:class:`Tensor`. Operations on tensors that require gradients remember their
inputs and a vector-Jacobian product; :class:`Tape` orders those records
topologically and replays them backwards.

Only first derivatives are supported.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "grad",
    "value_and_grad",
    "evaluate",
    "gradient_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit a primitive's signature."""


def _shape_error(op: str, *shapes) -> ShapeError:
    dims = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible operand shapes {dims}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A float64 array node in a differentiable computation."""

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple, vjp: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        return out

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    return out


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Topologically ordered record of the operations that produced ``output``.

    Inputs always precede the operations that consume them, so a single
    reverse sweep visits every node exactly once.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        if not output.requires_grad:
            return
        # iterative depth-first post-order; a node is marked when expanded,
        # so it is emitted only after every node it depends on
        visited: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate gradients of the output; returns ``{id(tensor): grad}``."""
        out = self.output
        if seed is None:
            if out.data.size != 1:
                raise ShapeError(
                    f"backward: output must be scalar, got shape {out.shape}"
                )
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``.

    Inputs that do not influence the output (or are detached) get zeros.
    """
    if output.data.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    grads = Tape(output).backward()
    return [
        np.array(grads[id(x)], dtype=np.float64).reshape(x.shape)
        if id(x) in grads
        else np.zeros_like(x.data)
        for x in inputs
    ]


def evaluate(program: Callable[..., Tensor], inputs: Sequence) -> Tensor:
    """Run ``program`` on ``inputs`` (arrays are wrapped as constant tensors)."""
    return program(*[as_tensor(x) for x in inputs])


def value_and_grad(program: Callable[..., Tensor], inputs: Sequence):
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = program(*tensors)
    return out.item(), grad(out, tensors)


@dataclass
class GradCheckReport:
    max_rel_error: list[float] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error)


def gradient_check(
    program: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-4,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare backpropagated gradients with central differences.

    The error for each input is ``max|g_ad - g_fd| / max(max|g_fd|, 1e-12)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    _, analytic = value_and_grad(program, arrays)
    report = GradCheckReport(tolerance=tolerance)
    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            args_p = [a.copy() for a in arrays]
            args_m = [a.copy() for a in arrays]
            args_p[k].reshape(-1)[i] += step
            args_m[k].reshape(-1)[i] -= step
            fp = evaluate(program, args_p).item()
            fm = evaluate(program, args_m).item()
            flat[i] = (fp - fm) / (2.0 * step)
        scale = max(np.max(np.abs(numeric), initial=0.0), 1e-12)
        err = np.max(np.abs(analytic[k] - numeric), initial=0.0) / scale
        report.max_rel_error.append(float(err))
    return report


# ---------------------------------------------------------------------------
# elementwise primitives


def _binary_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(out, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._node(out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a) -> Tensor:
    """``x * sigmoid(x)`` with no learnable slope."""
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)

    return Tensor._node(out, (a,), vjp)


def atan2(y, x) -> Tensor:
    """Elementwise ``atan2(y, x)``; the gradient is taken as zero at the origin."""
    y, x = as_tensor(y), as_tensor(x)
    _binary_shapes("atan2", y, x)
    out = np.arctan2(y.data, x.data)
    r2 = x.data**2 + y.data**2
    safe = np.where(r2 > 0.0, r2, 1.0)
    zero = r2 == 0.0

    def vjp(g):
        gy = np.where(zero, 0.0, g * x.data / safe)
        gx = np.where(zero, 0.0, -g * y.data / safe)
        return (
            _unbroadcast(gy, y.shape) if y.requires_grad else None,
            _unbroadcast(gx, x.shape) if x.requires_grad else None,
        )

    return Tensor._node(out, (y, x), vjp)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero gradient."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data**2, axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, gk * a.data / safe, 0.0),)

    return Tensor._node(out, (a,), vjp)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return Tensor._node(out, (a, b), vjp)


def gaussian(x, mean, sigma: float) -> Tensor:
    """``exp(-(x - mean)^2 / (2 sigma^2))`` with broadcasting."""
    x, mean = as_tensor(x), as_tensor(mean)
    _binary_shapes("gaussian", x, mean)
    diff = x.data - mean.data
    out = np.exp(-0.5 * (diff / sigma) ** 2)

    def vjp(g):
        gd = -g * out * diff / sigma**2
        return (
            _unbroadcast(gd, x.shape) if x.requires_grad else None,
            _unbroadcast(-gd, mean.shape) if mean.requires_grad else None,
        )

    return Tensor._node(out, (x, mean), vjp)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor._node(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(out), (a,), vjp)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        if axis == 0 and indices.ndim == 1:
            np.add.at(full, indices, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
            np.add.at(moved, indices, gm)
        return (full,)

    return Tensor._node(out, (a,), vjp)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape != a.shape[:1]:
        raise _shape_error("segment_sum", a.shape, segment_ids.shape)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segment_ids, a.data)
    return Tensor._node(out, (a,), lambda g: (g[segment_ids],))


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concatenate", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(out, tuple(ts), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("stack", *[t.shape for t in ts]) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._node(out, tuple(ts), vjp)


def roll_stack(a, axis: int) -> Tensor:
    """Stack every circular shift of ``a`` along ``axis``.

    ``out[s] = np.roll(a, s, axis)`` for ``s = 0 .. a.shape[axis] - 1``.
    """
    a = as_tensor(a)
    n = a.shape[axis]
    out = np.stack([np.roll(a.data, s, axis=axis) for s in range(n)])

    def vjp(g):
        total = np.zeros_like(a.data)
        for s in range(n):
            total += np.roll(g[s], -s, axis=axis)
        return (total,)

    return Tensor._node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = gb = None
        ad, bd, gg = a.data, b.data, g
        if bd.ndim == 1:
            bd = bd[:, None]
            gg = gg[..., None]
        if ad.ndim == 1:
            ad = ad[None, :]
            gg = gg[..., None, :]
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return ga, gb

    return Tensor._node(out, (a, b), vjp)


def sparse_matmul(values, rows: np.ndarray, cols: np.ndarray, n_rows: int, dense) -> Tensor:
    """``S @ dense`` where ``S`` is COO with differentiable ``values``.

    Duplicate (row, col) entries are summed. This is the scatter used to place
    messages onto spherical grids; its transpose is the matching gather.
    """
    values, dense = as_tensor(values), as_tensor(dense)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if values.ndim != 1 or rows.shape != values.shape or cols.shape != values.shape:
        raise _shape_error("sparse_matmul", values.shape, rows.shape, cols.shape)
    if dense.ndim != 2 or (cols.size and cols.max() >= dense.shape[0]):
        raise _shape_error("sparse_matmul", (n_rows, dense.shape[0] if dense.ndim else 0), dense.shape)
    mat = sp.csr_matrix((values.data, (rows, cols)), shape=(n_rows, dense.shape[0]))
    out = np.asarray(mat @ dense.data)

    def vjp(g):
        gv = gd = None
        if values.requires_grad:
            gv = np.einsum("km,km->k", g[rows], dense.data[cols])
        if dense.requires_grad:
            gd = np.asarray(mat.T @ g)
        return gv, gd

    return Tensor._node(out, (values, dense), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._node(out, (a,), vjp)


def group_norm(a, group_size: int, eps: float = 1e-5) -> Tensor:
    """Normalise consecutive groups of ``group_size`` channels along the last axis.

    No affine parameters; scale and shift are applied by the caller.
    """
    a = as_tensor(a)
    c = a.shape[-1]
    if group_size < 1 or c % group_size:
        raise _shape_error("group_norm", a.shape, (group_size,))
    grouped = a.data.reshape(a.shape[:-1] + (c // group_size, group_size))
    mu = grouped.mean(axis=-1, keepdims=True)
    xc = grouped - mu
    var = np.mean(xc**2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gg = g.reshape(grouped.shape)
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        return (gx.reshape(a.shape),)

    return Tensor._node(xhat.reshape(a.shape), (a,), vjp)


def l1(pred, target) -> Tensor:
    """Mean absolute difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("l1", pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(diff.size, 1)
    out = np.asarray(np.abs(diff).sum() / n)

    def vjp(g):
        s = np.sign(diff) * (g / n)
        return (
            s if pred.requires_grad else None,
            -s if target.requires_grad else None,
        )

    return Tensor._node(out, (pred, target), vjp)
