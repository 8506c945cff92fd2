"""Minimal reverse-mode automatic differentiation over dense f64 arrays.

Exactly the operator set the classifier needs, plus SGD with momentum, a
finite-difference gradient checker, and the MLS1 checkpoint format. All
computation is f64; relu's subgradient at 0 is 0 and max ties route their
gradient to the lowest index, both fixed for determinism.

Set ``autograd.DEBUG = True`` to reject non-finite op inputs.
"""

import struct

import numpy as np

from occlume import _kernels
from occlume.rng import generator

DEBUG = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values entering {name or 'tensor'}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate exact reverse-mode gradients into every reachable tensor.

        Repeated calls without zeroing add up, matching plain gradient
        accumulation.
        """
        if self.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad or node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                key = id(parent)
                flowing[key] = pg if key not in flowing else flowing[key] + pg

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _needs(*tensors) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _node(data, parents, backward, name=None) -> Tensor:
    if _needs(*parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward=backward, name=name)
    return Tensor(data, name=name)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    """Elementwise add; also supports a (1, D) row broadcast against (N, D)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        def back(g):
            return g, g
    elif a.data.ndim == 2 and b.shape == (1, a.shape[1]):
        def back(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _node(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def back(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), back, "mul")


def smul(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)

    def back(g):
        return (g * c,)

    return _node(x.data * c, (x,), back, "smul")


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0.0

    def back(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), back, "relu")


def log(x) -> Tensor:
    x = _wrap(x)

    def back(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), back, "log")


def transpose(x) -> Tensor:
    x = _wrap(x)

    def back(g):
        return (np.ascontiguousarray(g.T),)

    return _node(np.ascontiguousarray(x.data.T), (x,), back, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), back, "concat")


def broadcast_rows(x, n: int) -> Tensor:
    """Tile a (1, D) row to (n, D)."""
    x = _wrap(x)
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ValueError(f"broadcast_rows wants (1, D), got {x.shape}")

    def back(g):
        return (g.sum(axis=0, keepdims=True),)

    return _node(np.broadcast_to(x.data, (n, x.shape[1])).copy(), (x,), back, "broadcast")


def gather_rows(x, indices) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], (x,), back, "gather")


def sum_all(x) -> Tensor:
    x = _wrap(x)

    def back(g):
        return (np.full_like(x.data, float(g)),)

    return _node(np.array(x.data.sum()), (x,), back, "sum")


def max_rows_grouped(x, group: int) -> Tensor:
    """Column-wise max over consecutive groups of `group` rows.

    (G*group, D) collapses to (G, D); gradient flows only to the first
    (lowest-index) argmax row within each group.
    """
    x = _wrap(x)
    rows, d = x.shape
    if rows % group != 0:
        raise ValueError(f"group {group} does not divide {rows} rows")
    g_count = rows // group
    view = x.data.reshape(g_count, group, d)
    arg = view.argmax(axis=1)
    out = np.take_along_axis(view, arg[:, None, :], axis=1)[:, 0, :]
    row_ids = arg + (np.arange(g_count) * group)[:, None]
    col_ids = np.broadcast_to(np.arange(d), (g_count, d))

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (row_ids, col_ids), g)
        return (gx,)

    return _node(out, (x,), back, "maxgroup")


def max_rows(x) -> Tensor:
    """Global column-wise max: (N, D) to (1, D)."""
    x = _wrap(x)
    return max_rows_grouped(x, x.shape[0])


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of x / temperature, computed with max subtraction."""
    x = _wrap(x)
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((y * (g - dot)) / temperature,)

    return _node(y, (x,), back, "softmax")


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-column normalization over the row axis.

    Train mode normalizes by batch statistics and folds them into the running
    buffers (plain ndarrays mutated in place). Eval mode is a pure affine map
    using the running buffers.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    m = x.shape[0]
    if training:
        mean = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean[0]
        running_var *= 1.0 - momentum
        running_var += momentum * var[0]
    else:
        mean = running_mean[None, :]
        var = running_var[None, :]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        dxhat = g * gamma.data
        if training:
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=0, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), back, "batchnorm")


def straight_through(soft, hard_data) -> Tensor:
    """Forward the hard values, pass gradients straight to the soft input."""
    soft = _wrap(soft)
    hard = np.asarray(hard_data, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through shape mismatch: {hard.shape} vs {soft.shape}")

    def back(g):
        return (g,)

    return _node(hard, (soft,), back, "straight_through")


def gumbel_noise(shape, seed) -> Tensor:
    """i.i.d. Gumbel(0, 1) samples g = -log(-log(U)); carries no gradient."""
    rng = generator(seed, "gumbel")
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return constant(-np.log(-np.log(u)), name="gumbel")


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _wrap(logits)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if lab.shape[0] != b:
        raise ValueError(f"{b} logit rows but {lab.shape[0]} labels")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(b), lab]).mean())
    probs = np.exp(z - lse[:, None])

    def back(g):
        d = probs.copy()
        d[np.arange(b), lab] -= 1.0
        return (d * (float(g) / b),)

    return _node(np.array(loss), (logits,), back, "cross_entropy")


def chamfer_loss(pred, target) -> Tensor:
    """Chamfer distance with gradient to `pred` only; `target` is constant.

    Matches sampling.chamfer_distance on the same data; gradients flow
    through the realized nearest-neighbor pairings.
    """
    pred = _wrap(pred)
    tgt = np.ascontiguousarray(target.data if isinstance(target, Tensor) else target,
                               dtype=np.float64)
    p = np.ascontiguousarray(pred.data)
    if p.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("chamfer loss needs non-empty clouds")
    idx_pt, d_pt = _kernels.nearest_neighbor(p, tgt)
    idx_tp, d_tp = _kernels.nearest_neighbor(tgt, p)
    value = d_pt.mean() + d_tp.mean()

    def back(g):
        gp = (2.0 / p.shape[0]) * (p - tgt[idx_pt])
        contrib = (2.0 / tgt.shape[0]) * (p[idx_tp] - tgt)
        np.add.at(gp, idx_tp, contrib)
        return (gp * float(g),)

    return _node(np.array(value), (pred,), back, "chamfer")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SgdState:
    """Momentum buffers, one per parameter, keyed by id."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, params, lr: float) -> None:
        for p in params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != param {p.data.shape}")
            v = self.velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[id(p)] = v
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


def sgd_step(params, state: SgdState, lr: float) -> None:
    state.step(params, lr)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, tensors, eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    `fn` must be a deterministic scalar-valued closure over `tensors`.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# MLS1 checkpoint format
# ---------------------------------------------------------------------------

MLS1_MAGIC = b"MLS1"


def save_checkpoint(path, tensors: dict) -> None:
    """magic, u32 count, then per tensor: u32 name length + bytes, u32 rank,
    u32 dims, f64 little-endian data. Names are written sorted."""
    blob = [MLS1_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        data = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        enc = name.encode("utf-8")
        blob.append(struct.pack("<I", len(enc)))
        blob.append(enc)
        blob.append(struct.pack("<I", data.ndim))
        blob.append(struct.pack(f"<{data.ndim}I", *data.shape))
        blob.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MLS1_MAGIC:
        raise ValueError(f"{path}: not an MLS1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        out[name] = arr.reshape(dims).astype(np.float64)
    return out
