"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Forward functions build values eagerly and record backward rules on an
explicit Tape (recording order is the topological order). All math is double
precision by default so finite-difference gradient checks and 1e-4 loss
thresholds are meaningful; float32 is available via set_default_dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from statebench.errors import ConfigurationError, DataError, DivergedError, UsageError

_DEFAULT_DTYPE = np.float64

# When True, every forward op asserts its output is finite. Slow; enabled by
# the gradient/self-test suites only.
DEBUG_CHECK_FINITE = False

# Additive mask value for attention: finite (no Inf on the tape) but far enough
# below any real score that exp() underflows to exactly 0.0.
MASK_NEG = -1e30

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense real tensor. `data` is a numpy array; `grad` (same shape) is
    populated by backward() on requires_grad leaves."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape = tape
        if requires_grad and tape is None:
            raise UsageError("a requires_grad leaf must be created via Tape.leaf")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat view of the underlying storage."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Tensor that never tracks gradients (no tape)."""
    return Tensor(data, requires_grad=False, tape=None)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: object  # grad_out -> tuple of grads aligned with inputs


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede their
    consumers and a single reverse sweep visits each node exactly once.
    """

    nodes: list = field(default_factory=list)

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        return Tensor(data, requires_grad=requires_grad, tape=self)

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append(_Node(output, inputs, backward_fn))


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a forward value, recording it when any input tracks gradients."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(value)):
        raise ConfigurationError("non-finite forward value")
    tape = None
    for t in inputs:
        if t.requires_grad:
            tape = t.tape
            break
    if tape is None:
        return Tensor(value)
    out = Tensor(value, requires_grad=True, tape=tape)
    tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-matmul broadcasting.

    Supported: 2D @ 2D, ND @ 2D (shared right factor), ND @ ND with equal
    leading dims. That covers everything the three model families need.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ConfigurationError(
            f"matmul: shapes {ad.shape} and {bd.shape} do not conform"
        )
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ConfigurationError(
            f"matmul: leading dims differ: {ad.shape} vs {bd.shape}"
        )
    value = ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ bd.swapaxes(-1, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = np.tensordot(ad, g, axes=(range(ad.ndim - 1), range(g.ndim - 1)))
            else:
                gb = ad.swapaxes(-1, -2) @ g
                gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _result(value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with broadcasting (also serves as bias / mask add)."""
    value = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    ad, bd = a.data, b.data
    value = ad * bd

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(value, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    value = a.data * c

    def backward(g):
        return (g * c,)

    return _result(value, (a,), backward)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DataError(
            f"embedding_gather: id out of range for table of {table.data.shape[0]} rows"
        )
    value = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _result(value, (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    value = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        n = xd.shape[-1]
        if x.requires_grad:
            gy = g * gain.data
            # dx = inv * (gy - mean(gy) - xhat * mean(gy * xhat))
            gx = inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.data.shape)
        return gx, gg, gb

    return _result(value, (x, gain, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # dx = p * (g - sum(g * p))
        dot = (g * value).sum(axis=-1, keepdims=True)
        return (value * (g - dot),)

    return _result(value, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (GPT-2 convention)."""
    # x**3 etc. spelled as products: numpy's array power falls back to libm
    # pow per element, which is an order of magnitude slower
    xd = x.data
    xsq = xd * xd
    inner = _GELU_C * (xd + 0.044715 * (xsq * xd))
    t = np.tanh(inner)
    value = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + (3 * 0.044715) * xsq)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * ((1.0 - t * t) * d_inner)
        return (g * dx,)

    return _result(value, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    value = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * value * (1.0 - value),)

    return _result(value, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    value = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - value * value),)

    return _result(value, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _result(value, tuple(tensors), backward)


def tensor_slice(x: Tensor, key) -> Tensor:
    """Basic slicing (tuple of slice objects / ints). Gradient scatters back."""
    value = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(value, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.data.shape
    value = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(orig),)

    return _result(value, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    value = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _result(value, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar (handy as a backward root in tests)."""
    value = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.data.shape),)

    return _result(value, (x,), backward)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                         row_weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over mask-true positions.

    logits: [..., V]; targets/mask: [...] int ids and booleans. Mask-false
    positions contribute zero loss and zero gradient. A mask with no true
    entry is a malformed example set, not a zero loss.

    row_weights (optional, [rows]) weights each leading row's positions; a
    weight of c reproduces exactly the loss of that row duplicated c times.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.data.shape[:-1] or mask.shape != targets.shape:
        raise ConfigurationError(
            f"masked_cross_entropy: logits {logits.data.shape}, targets "
            f"{targets.shape}, mask {mask.shape} do not align"
        )
    if not mask.any():
        raise ConfigurationError("masked_cross_entropy: mask has no supervised position")
    v = logits.data.shape[-1]
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= v):
        raise DataError(f"masked_cross_entropy: target id out of range for V={v}")
    if row_weights is None:
        wmask = mask.astype(np.float64)
    else:
        wmask = mask * np.asarray(row_weights, dtype=np.float64).reshape(
            (-1,) + (1,) * (mask.ndim - 1)
        )
    denom = wmask.sum()

    ld = logits.data
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None].clip(0, v - 1), axis=-1)[..., 0]
    value = np.asarray(-(picked * wmask).sum() / denom)

    def backward(g):
        # d/dlogits = (softmax - onehot) * weighted mask / denom
        onehot_sub = np.exp(logp)
        flat = onehot_sub.reshape(-1, v)
        flat[np.arange(targets.size), targets.reshape(-1).clip(0, v - 1)] -= 1.0
        onehot_sub *= wmask[..., None]
        return (g * onehot_sub / denom,)

    return _result(value, (logits,), backward)


_FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "embedding_gather": embedding_gather,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "concat": concat,
    "slice": tensor_slice,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive op by name (the documented op vocabulary)."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, root: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from root.

    Repeated calls accumulate into leaf grads. Intermediate gradients live in
    a per-call map so a second sweep does not double-count.
    """
    if root.data.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.data.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: list[Tensor] = []
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.append(t)
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if not t.requires_grad:
                continue
            if id(t) in produced:
                if gi is not None:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
            else:
                leaves.append(t)
                if gi is not None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
    # leaves on the tape that never feed the root still get an explicit zero
    for t in leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Optimizer state over one flat parameter vector."""

    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
        raise ConfigurationError("adam_init: invalid hyperparameters")
    return AdamState(
        step_count=0,
        first_moment=np.zeros(n_params, dtype=_DEFAULT_DTYPE),
        second_moment=np.zeros(n_params, dtype=_DEFAULT_DTYPE),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam step; mutates state, returns updated params."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ConfigurationError("adam_update: params/grads/state not congruent")
    if not np.all(np.isfinite(grads)):
        raise DivergedError("NaN/Inf gradient")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = (
        state.beta2 * state.second_moment + (1 - state.beta2) * (grads * grads)
    )
    m_hat = state.first_moment / (1 - state.beta1**t)
    v_hat = state.second_moment / (1 - state.beta2**t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
