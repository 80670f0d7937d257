"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records primitive operations as they execute; ``backward`` replays
them in reverse, accumulating gradients into a per-node map. The op set is
deliberately small: everything else (sigmoid, ELU, squared error, ...) is a
composition. Tensors are float32 by default; a tape may be created with
``dtype=np.float64`` when higher precision is needed (e.g. gradient checking).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeMismatch(AutodiffError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(AutodiffError):
    """Operand values lie outside the op's domain (e.g. log of x <= 0)."""


@dataclass
class _Node:
    """One recorded op: gradient callback plus the ids it feeds gradients to."""

    op: str
    input_ids: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Array value, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"

    # Operator sugar; scalars are folded in as constants.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.data.dtype)
    return Tensor(arr)


class Tape:
    """Op recorder. ``recording=False`` gives a no-grad evaluation context."""

    def __init__(self, dtype=np.float32, recording: bool = True):
        self.dtype = np.dtype(dtype)
        self.recording = recording
        self.nodes: list[_Node] = []
        self.leaf_ids: list[int] = []
        self.grads: dict[int, np.ndarray] = {}

    # ---- node construction -------------------------------------------------

    def _record(self, op: str, inputs: tuple, backward, out: np.ndarray) -> Tensor:
        live = [t.node_id for t in inputs if isinstance(t, Tensor) and t.node_id is not None]
        if not self.recording or not live:
            return Tensor(out, self, None)
        node_id = len(self.nodes)
        ids = tuple(t.node_id if isinstance(t, Tensor) else None for t in inputs)
        self.nodes.append(_Node(op, ids, backward))
        return Tensor(out, self, node_id)

    def leaf(self, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        """Register an input tensor. Gradients are reported for every leaf."""
        arr = np.asarray(data, dtype=self.dtype)
        if not self.recording or not requires_grad:
            return Tensor(arr, self, None)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), lambda g: ()))
        self.leaf_ids.append(node_id)
        return Tensor(arr, self, node_id)

    def constant(self, data) -> Tensor:
        """A value that participates in ops but never receives gradient."""
        return Tensor(np.asarray(data, dtype=self.dtype), self, None)

    # ---- reverse pass ------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        ``loss`` must be scalar-shaped. Leaves that do not influence the loss
        get explicit zero gradients so optimizers can treat the output map as
        total.
        """
        if loss.tape is not self:
            raise AutodiffError("backward: loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.node_id is not None:
            grads[loss.node_id] = np.ones_like(loss.data)
            for node_id in range(loss.node_id, -1, -1):
                g = grads.get(node_id)
                if g is None:
                    continue
                node = self.nodes[node_id]
                if node.op == "leaf":
                    continue
                for in_id, in_grad in zip(node.input_ids, node.backward(g)):
                    if in_id is None or in_grad is None:
                        continue
                    acc = grads.get(in_id)
                    grads[in_id] = in_grad if acc is None else acc + in_grad
        self.grads = grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient for ``tensor`` after ``backward`` (zeros if unreached)."""
        if tensor.node_id is None:
            raise AutodiffError("grad: tensor is not a recorded node")
        g = self.grads.get(tensor.node_id)
        if g is None or g.shape != tensor.data.shape:
            g = np.zeros_like(tensor.data)
            self.grads[tensor.node_id] = g
        return g


# ---- helpers ----------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _NullTape:
    """Stand-in tape for arithmetic between plain constants."""

    recording = False

    def _record(self, op, inputs, backward, out):
        return Tensor(out, None, None)


_NULL_TAPE = _NullTape()


def _tape_of(*tensors: Tensor):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise AutodiffError("op: operands belong to different tapes")
    return tape if tape is not None else _NULL_TAPE


# ---- primitive ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return tape._record("matmul", (a, b), backward, out)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: incompatible shapes {a.shape} + {b.shape}") from exc
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._record("add", (a, b), backward, out)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub: incompatible shapes {a.shape} - {b.shape}") from exc
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._record("sub", (a, b), backward, out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return tape._record("mul", (a, b), backward, out)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    tape = _tape_of(a)
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward(g):
        return (g * c,)

    return tape._record("scalar_mul", (a,), backward, out)


def relu(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return tape._record("relu", (a,), backward, out)


def abs_(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return tape._record("abs", (a,), backward, out)


def tanh(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return tape._record("tanh", (a,), backward, out)


def exp(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return tape._record("exp", (a,), backward, out)


def log(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    if np.any(a.data <= 0):
        raise DomainError("log: operand has entries <= 0")
    out = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return tape._record("log", (a,), backward, out)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return tape._record("sum", (a,), backward, out)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return tape._record("mean", (a,), backward, out)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat: empty tensor list")
    tape = _tape_of(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return tape._record("concat", tuple(tensors), backward, out)


def gather_index(a: Tensor, index: np.ndarray) -> Tensor:
    """Select one entry along the last axis: out[...] = a[..., index[...]]."""
    tape = _tape_of(a)
    idx = np.asarray(index)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeMismatch(
            f"gather_index: index shape {idx.shape} must equal operand shape {a.shape} minus last axis"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[-1]):
        raise DomainError("gather_index: index out of range for last axis")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return tape._record("gather_index", (a,), backward, out)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    tape = _tape_of(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return tape._record("softmax", (a,), backward, out)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    tape = _tape_of(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return tape._record("log_softmax", (a,), backward, out)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    tape = _tape_of(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src = a.data.shape

    def backward(g):
        return (_unbroadcast(g, src),)

    return tape._record("broadcast_to", (a,), backward, out)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    tape = _tape_of(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    src = a.data.shape

    def backward(g):
        return (g.reshape(src),)

    return tape._record("reshape", (a,), backward, out)


def stop_grad(a: Tensor) -> Tensor:
    """Cut the gradient path: same value, no tape node."""
    return Tensor(a.data, a.tape, None)


# ---- compositions ------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    """sigmoid(x) = 0.5 * tanh(x / 2) + 0.5 (composition, not a new primitive)."""
    half = tanh(scalar_mul(a, 0.5))
    out = add(scalar_mul(half, 0.5), _const_like(a, 0.5))
    return out


def elu(a: Tensor) -> Tensor:
    """elu(x) = x if x > 0 else exp(x) - 1, composed from relu/exp."""
    neg_part = scalar_mul(relu(scalar_mul(a, -1.0)), -1.0)  # min(x, 0)
    return add(relu(a), sub(exp(neg_part), _const_like(a, 1.0)))


def _const_like(a: Tensor, value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=a.data.dtype), a.tape, None)


def gaussian_reparam_sample(mu: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample N(mu, I) via mu + eps with eps a constant; gradient flows to mu."""
    eps = rng.standard_normal(mu.data.shape).astype(mu.data.dtype)
    return add(mu, Tensor(eps, mu.tape, None))


def kl_diag_gaussian(mu_p: Tensor, logvar_p: Tensor, mu_q: Tensor, logvar_q: Tensor) -> Tensor:
    """KL(N(mu_p, diag exp(logvar_p)) || N(mu_q, diag exp(logvar_q))).

    Reduces over the trailing axis; leading axes are preserved.
    """
    var_ratio = exp(sub(logvar_p, logvar_q))
    diff = sub(mu_q, mu_p)
    mahal = mul(mul(diff, diff), exp(scalar_mul(logvar_q, -1.0)))
    inner = add(add(var_ratio, mahal), sub(logvar_q, logvar_p))
    summed = sum_(inner, axis=-1)
    d = mu_p.data.shape[-1]
    return scalar_mul(add(summed, _const_like(summed, -float(d))), 0.5)


# ---- gradient checking -------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape, *leaves) -> scalar Tensor`` must rebuild the computation from
    scratch on the given tape. Runs in float64 so finite-difference noise does
    not mask real errors. Relative error: |a - n| / max(1e-8, |a| + |n|).
    """
    params64 = [np.asarray(p, dtype=np.float64) for p in params]

    def value(ps) -> float:
        tape = Tape(dtype=np.float64, recording=False)
        leaves = [tape.leaf(p) for p in ps]
        return float(fn(tape, *leaves).data)

    tape = Tape(dtype=np.float64)
    leaves = [tape.leaf(p) for p in params64]
    loss = fn(tape, *leaves)
    tape.backward(loss)
    analytic = [tape.grad(leaf) for leaf in leaves]

    worst = 0.0
    for k, p in enumerate(params64):
        flat = p.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value(params64)
            flat[i] = orig - eps
            lo = value(params64)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        a = analytic[k].reshape(-1)
        denom = np.maximum(1e-8, np.abs(a) + np.abs(num))
        worst = max(worst, float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0)
    return worst


# ---- optimizer ---------------------------------------------------------------


@dataclass
class Parameter:
    """Named trainable array; optimizers key their state on the name."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g.astype(np.float64))))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global norm exceeds it."""
    norm = global_norm(grads.values())
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-5):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            g = g.astype(np.float32, copy=False)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(self.lr) * update

    # Checkpoint support: expose/restore moments and step counter.
    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.asarray([float(self.t)], dtype=np.float32)}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(round(float(tensors[f"{prefix}/step"][0])))
        for name in self.m:
            self.m[name][...] = tensors[f"{prefix}/m/{name}"]
            self.v[name][...] = tensors[f"{prefix}/v/{name}"]
