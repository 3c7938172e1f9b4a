"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is implicit: every operation returns a new `Tensor` that records
its parent nodes and a backward rule, so creation order is already a
topological order of the tape. Leaves (inputs, parameters) are rounded to
32-bit storage on construction; interior nodes cache 64-bit forward values
and all backward arithmetic runs in 64-bit, which keeps loss scalars
accurate enough for central finite-difference checks at h=1e-3.

Loss-producing operations return a `LossValue` (scalar plus tape handle).
LossValues compose with `+`, `-` and scalar `*` so that mixed objectives
(classification minus auxiliary plus weighted entropy) stay differentiable.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractViolation

_SEQ = itertools.count()

# probabilities are clamped to this floor inside logarithms
PROB_FLOOR = 1e-12
_LN2 = float(np.log(2.0))


class Tensor:
    """Node in the implicit tape.

    Leaves hold user data stored with float32 precision; interior nodes are
    created by the ops below and cache float64 forwards for their backward
    rules. `value` always presents float32, matching the public storage
    contract.
    """

    __slots__ = ("_val", "grad", "_parents", "_backward", "_seq", "op", "_used")

    def __init__(self, value, _parents=(), _backward=None, _op="leaf"):
        if _parents:
            self._val = np.asarray(value, dtype=np.float64)
        else:
            v32 = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
            if not np.all(np.isfinite(v32)):
                raise ContractViolation("tensor data must be finite")
            self._val = v32.astype(np.float64)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._seq = next(_SEQ)
        self.op = _op
        self._used = False

    @property
    def value(self) -> np.ndarray:
        """Forward value as float32 (public storage precision)."""
        return self._val.astype(np.float32)

    @property
    def shape(self) -> tuple:
        return tuple(self._val.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major float32 view of the value."""
        return self.value.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class LossValue:
    """Scalar loss with a handle into the tape that produced it."""

    __slots__ = ("node",)

    def __init__(self, node: Tensor):
        if node.shape != ():
            raise ContractViolation("loss node must be scalar")
        self.node = node

    @property
    def scalar(self) -> float:
        return float(self.node._val)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(_scalar_add(self.node, other.node))

    def __sub__(self, other: "LossValue") -> "LossValue":
        return LossValue(_scalar_add(self.node, other.node, -1.0))

    def __mul__(self, c: float) -> "LossValue":
        return LossValue(_scalar_scale(self.node, float(c)))

    __rmul__ = __mul__

    def __repr__(self):
        return f"LossValue({self.scalar:.6g})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _mark(nodes):
    for n in nodes:
        n._used = True


def _node(value, parents, backward, op) -> Tensor:
    _mark(parents)
    return Tensor(value, _parents=parents, _backward=backward, _op=op)


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitive ops


def forward_dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: out[i,o] = sum_k x[i,k] w[k,o] + b[o]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if len(x.shape) != 2 or len(w.shape) != 2 or len(b.shape) != 1:
        raise ContractViolation("forward_dense expects x[B,I], w[I,O], b[O]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"forward_dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    out = x._val @ w._val + b._val

    def backward(g):
        _acc(x, g @ w._val.T)
        _acc(w, x._val.T @ g)
        _acc(b, g.sum(axis=0))

    return _node(out, (x, w, b), backward, "dense")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x._val > 0

    def backward(g):
        _acc(x, g * mask)

    return _node(x._val * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x._val))

    def backward(g):
        _acc(x, g * s * (1.0 - s))

    return _node(s, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x._val)

    def backward(g):
        _acc(x, g * (1.0 - t * t))

    return _node(t, (x,), backward, "tanh")


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """Elementwise a*x + b with scalar constants."""
    x = as_tensor(x)

    def backward(g):
        _acc(x, g * a)

    return _node(a * x._val + b, (x,), backward, "affine")


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ContractViolation(f"add shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        _acc(x, g)
        _acc(y, g)

    return _node(x._val + y._val, (x, y), backward, "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ContractViolation(f"sub shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        _acc(x, g)
        _acc(y, -g)

    return _node(x._val - y._val, (x, y), backward, "sub")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _acc(x, g * 2.0 * x._val)

    return _node(x._val * x._val, (x,), backward, "square")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x._val.reshape(shape)

    def backward(g):
        _acc(x, g.reshape(x._val.shape))

    return _node(out, (x,), backward, "reshape")


def flatten_rows(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(rest)]."""
    x = as_tensor(x)
    b = x.shape[0] if x.shape else 0
    return reshape(x, (b, -1)) if len(x.shape) != 2 else x


def rotate_hw(x: Tensor, quarter_turns: int) -> Tensor:
    """Rotate [B,C,H,W] images by k quarter turns in the HW plane."""
    x = as_tensor(x)
    if len(x.shape) != 4:
        raise ContractViolation("rotate_hw expects [B,C,H,W]")
    k = quarter_turns % 4
    out = np.ascontiguousarray(np.rot90(x._val, k, axes=(2, 3)))

    def backward(g):
        _acc(x, np.ascontiguousarray(np.rot90(g, -k, axes=(2, 3))))

    return _node(out, (x,), backward, "rot90")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise stable softmax over [B,N] logits."""
    logits = as_tensor(logits)
    if len(logits.shape) != 2:
        raise ContractViolation("softmax expects [B,N]")
    z = logits._val - logits._val.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _acc(logits, p * (g - dot))

    return _node(p, (logits,), backward, "softmax")


def sum_all(x: Tensor) -> LossValue:
    x = as_tensor(x)

    def backward(g):
        _acc(x, np.full(x._val.shape, float(g)))

    return LossValue(_node(x._val.sum(), (x,), backward, "sum"))


def mean_rows(rows: Tensor) -> LossValue:
    """Mean of a per-sample [B] vector -> scalar loss."""
    rows = as_tensor(rows)
    if len(rows.shape) != 1:
        raise ContractViolation("mean_rows expects a [B] vector")
    n = rows.shape[0]

    def backward(g):
        _acc(rows, np.full(rows._val.shape, float(g) / n))

    return LossValue(_node(rows._val.mean(), (rows,), backward, "mean"))


def scale_rows(rows: Tensor, weights: np.ndarray) -> Tensor:
    """Per-sample constant weighting of a [B] vector."""
    rows = as_tensor(rows)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != rows._val.shape:
        raise ContractViolation("scale_rows weight shape mismatch")

    def backward(g):
        _acc(rows, g * w)

    return _node(rows._val * w, (rows,), backward, "scale_rows")


def add_rows(a: Tensor, b: Tensor) -> Tensor:
    return add(a, b)


def sub_rows(a: Tensor, b: Tensor) -> Tensor:
    return sub(a, b)


def _scalar_add(a: Tensor, b: Tensor, sign_b: float = 1.0) -> Tensor:
    def backward(g):
        _acc(a, np.float64(g))
        _acc(b, np.float64(g) * sign_b)

    return _node(a._val + sign_b * b._val, (a, b), backward, "scalar_add")


def _scalar_scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _acc(a, np.float64(g) * c)

    return _node(a._val * c, (a,), backward, "scalar_scale")


# ---------------------------------------------------------------------------
# losses


def _check_prob_rows(p: np.ndarray, what: str):
    if p.ndim != 2:
        raise ContractViolation(f"{what} expects [B,N] probability rows")
    if np.any(p < -1e-7):
        raise ContractViolation(f"{what}: probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise ContractViolation(f"{what}: rows must sum to 1 within 1e-5")


def softmax_cross_entropy(logits: Tensor, labels) -> LossValue:
    """Mean over the batch of -log softmax(logits)[y].

    Backward yields (softmax(logits) - onehot(labels)) / B on the logits.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels)
    if len(logits.shape) != 2 or y.shape != (logits.shape[0],):
        raise ContractViolation("softmax_cross_entropy expects logits[B,N], labels[B]")
    b, n = logits.shape
    if np.any(y < 0) or np.any(y >= n):
        raise ContractViolation(f"labels must lie in [0,{n})")
    z = logits._val - logits._val.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp_y = z[np.arange(b), y] - logsumexp
    loss = -logp_y.mean()
    p = np.exp(z - logsumexp[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(b), y] -= 1.0
        _acc(logits, d * (float(g) / b))

    return LossValue(_node(loss, (logits,), backward, "xent"))


def cross_entropy_rows_np(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample -ln p_y from probabilities (no tape, stats helper)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, 1.0)
    return -np.log(p[np.arange(len(labels)), np.asarray(labels)])


def entropy_rows(probs: Tensor) -> Tensor:
    """Per-sample Shannon entropy in bits of [B,N] probability rows."""
    probs = as_tensor(probs)
    _check_prob_rows(probs._val, "entropy")
    p = probs._val
    pc = np.clip(p, PROB_FLOOR, 1.0)
    h = -(p * np.log2(pc)).sum(axis=1)

    def backward(g):
        # d/dp_i of -(p log2 pc) with the clamp active only below the floor
        d = -(np.log2(pc) + (p / pc) / _LN2)
        _acc(probs, d * g[:, None])

    return _node(h, (probs,), backward, "entropy_rows")


def entropy_loss(probs: Tensor) -> LossValue:
    """Mean over the batch of -sum_i p_i log2 p_i (0 log 0 := 0)."""
    return mean_rows(entropy_rows(probs))


def entropy_rows_np(probs: np.ndarray) -> np.ndarray:
    """Tape-free per-sample entropy in bits."""
    p = np.asarray(probs, dtype=np.float64)
    _check_prob_rows(p, "entropy")
    return -(p * np.log2(np.clip(p, PROB_FLOOR, 1.0))).sum(axis=1)


def mse_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample mean squared error over [B,F] pairs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or len(a.shape) != 2:
        raise ContractViolation("mse_rows expects matching [B,F] tensors")
    f = a.shape[1]
    d = a._val - b._val

    def backward(g):
        scaled = d * (2.0 / f) * g[:, None]
        _acc(a, scaled)
        _acc(b, -scaled)

    return _node((d * d).mean(axis=1), (a, b), backward, "mse_rows")


def mse_loss(a: Tensor, b: Tensor) -> LossValue:
    """Mean of squared element-wise differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse shape mismatch: {a.shape} vs {b.shape}")
    n = a._val.size
    d = a._val - b._val

    def backward(g):
        scaled = d * (2.0 / n) * float(g)
        _acc(a, scaled)
        _acc(b, -scaled)

    return LossValue(_node((d * d).mean(), (a, b), backward, "mse"))


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Per-sample KL(p || q) in nats over [B,N] probability rows."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ContractViolation("kl shape mismatch")
    _check_prob_rows(p._val, "kl p")
    _check_prob_rows(q._val, "kl q")
    pv, qv = p._val, q._val
    pc = np.clip(pv, PROB_FLOOR, 1.0)
    qc = np.clip(qv, PROB_FLOOR, 1.0)
    logratio = np.log(pc) - np.log(qc)
    rows = (pv * logratio).sum(axis=1)

    def backward(g):
        _acc(p, (logratio + pv / pc) * g[:, None])
        _acc(q, -(pv / qc) * g[:, None])

    return _node(rows, (p, q), backward, "kl_rows")


def kl_divergence(p: Tensor, q: Tensor) -> LossValue:
    """Mean over the batch of KL(p || q)."""
    return mean_rows(kl_rows(p, q))


def cw_margin_rows(logits: Tensor, labels, kappa: float = 0.0, targeted: bool = False) -> Tensor:
    """Carlini-Wagner hinge per sample.

    Untargeted: max(Z_y - max_{i!=y} Z_i, -kappa); targeted flips the sign so
    that driving the hinge down pushes the target class on top.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels)
    b, n = logits.shape
    z = logits._val
    idx = np.arange(b)
    z_y = z[idx, y]
    masked = z.copy()
    masked[idx, y] = -np.inf
    other = masked.argmax(axis=1)
    z_other = z[idx, other]
    raw = (z_other - z_y) if targeted else (z_y - z_other)
    rows = np.maximum(raw, -kappa)
    active = raw > -kappa

    def backward(g):
        d = np.zeros_like(z)
        s = -1.0 if targeted else 1.0
        d[idx, y] += s * active * g
        d[idx, other] -= s * active * g
        _acc(logits, d)

    return _node(rows, (logits,), backward, "cw_margin")


def class_logit_sum(logits: Tensor, class_index: int) -> LossValue:
    """Sum over the batch of one class's logit (per-class gradient probe)."""
    logits = as_tensor(logits)
    b, n = logits.shape
    if not 0 <= class_index < n:
        raise ContractViolation("class index out of range")

    def backward(g):
        d = np.zeros((b, n))
        d[:, class_index] = float(g)
        _acc(logits, d)

    return LossValue(_node(logits._val[:, class_index].sum(), (logits,), backward, "logit_sum"))


# ---------------------------------------------------------------------------
# backward pass


def _reachable(root: Tensor):
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node._parents)
    return order


def gradients(loss: LossValue, leaves) -> list:
    """Run one backward pass and return float64 gradients for `leaves`.

    Every reachable node contributes exactly one backward accumulation per
    input; processing order is descending creation sequence, which is a
    reverse topological order by construction.
    """
    if not isinstance(loss, LossValue):
        raise ContractViolation("gradients expects a LossValue")
    nodes = _reachable(loss.node)
    on_tape = {id(n) for n in nodes}
    for n in nodes:
        n.grad = None
    loss.node.grad = np.float64(1.0)
    for node in sorted(nodes, key=lambda n: n._seq, reverse=True):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    out = []
    for leaf in leaves:
        if not isinstance(leaf, Tensor):
            raise ContractViolation("gradient target must be a Tensor")
        if not leaf.is_leaf:
            raise ContractViolation("gradients are retained only for leaf tensors")
        if id(leaf) not in on_tape:
            if not leaf._used:
                raise ContractViolation("tensor never participated in any tape")
            out.append(np.zeros(leaf._val.shape))
        else:
            g = leaf.grad if leaf.grad is not None else np.zeros(leaf._val.shape)
            if not np.all(np.isfinite(g)):
                raise ContractViolation("non-finite gradient")
            out.append(g)
    return out


def input_gradient(loss: LossValue, x: Tensor) -> Tensor:
    """Gradient of `loss` with respect to the leaf tensor `x`."""
    return Tensor(gradients(loss, [x])[0].astype(np.float32))
