"""Dense float64 tensors with reverse-mode gradients.

Every differentiable layer in the pipeline is assembled from the
primitives here: broadcast arithmetic, matmul, activations, softmax /
log-softmax, layer normalization, dropout, multi-head self-attention,
and an Adam optimizer. Gradients propagate through per-op backward
closures over a topologically sorted tape (micrograd style, but on
numpy arrays so batches stay cheap).

All math runs in 64-bit floats so central finite-difference checks are
meaningful; seeded streams make every op bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Default epsilon inside the layer-norm square root. Small enough that
# normalized outputs hit mean 0 / variance 1 to ~1e-12 while still
# guarding the zero-variance case.
LAYER_NORM_EPS = 1e-12


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # ------------------------------------------------------------------
    # graph plumbing
    # ------------------------------------------------------------------
    @staticmethod
    def _result(data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            # Copy: backward closures may hand us a view of their own grad.
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        # Iterative post-order DFS: on a DAG this yields inputs before the
        # nodes that consume them, so the reversed order is a valid tape.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # arithmetic (numpy broadcasting rules apply)
    # ------------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g: Array) -> None:
            self._accumulate(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
                )

        return Tensor._result(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(other) / self

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ConfigError("only scalar exponents are supported")

        def backward(g: Array) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._result(self.data**exponent, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs 2-d+ operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ b.swapaxes(-1, -2), a.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(a.swapaxes(-1, -2) @ g, b.shape))

        return Tensor._result(a @ b, (self, other), backward)

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def backward(g: Array) -> None:
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g: Array) -> None:
            self._accumulate(g.reshape(self.shape))

        return Tensor._result(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def backward(g: Array) -> None:
            self._accumulate(g.transpose(inverse))

        return Tensor._result(self.data.transpose(axes), (self,), backward)

    def __getitem__(self, key) -> "Tensor":
        """Basic slicing or integer-array row gathers, with scatter-add backward."""
        if isinstance(key, Tensor):
            raise ConfigError("index with numpy arrays or slices, not Tensors")

        def backward(g: Array) -> None:
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            self._accumulate(buf)

        return Tensor._result(self.data[key], (self,), backward)

    def take_rows(self, indices: Array) -> "Tensor":
        """Gather rows along axis 0 (duplicate indices accumulate on backward)."""
        return self[np.asarray(indices, dtype=np.intp)]


def put_rows(values: Tensor, indices: Array, num_rows: int) -> Tensor:
    """Scatter `values` rows into a zero tensor of `num_rows` rows.

    Inverse of `take_rows` for disjoint index sets; each destination row
    must be written at most once.
    """
    indices = np.asarray(indices, dtype=np.intp)
    out = np.zeros((num_rows,) + values.shape[1:], dtype=np.float64)
    out[indices] = values.data

    def backward(g: Array) -> None:
        values._accumulate(g[indices])

    return Tensor._result(out, (values,), backward)


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is defined as 0

    def backward(g: Array) -> None:
        x._accumulate(g * mask)

    return Tensor._result(np.maximum(x.data, 0.0), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g: Array) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._result(x.data * cdf, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g: Array) -> None:
        x._accumulate(g * (1.0 - t * t))

    return Tensor._result(t, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g: Array) -> None:
        x._accumulate(g * e)

    return Tensor._result(e, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        x._accumulate(g / x.data)

    return Tensor._result(np.log(x.data), (x,), backward)


ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    """Element-wise activation by name ('gelu', 'relu', 'tanh')."""
    try:
        return ACTIVATIONS[kind.lower()](x)
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None


# ----------------------------------------------------------------------
# softmax family
# ----------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    return Tensor._result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g: Array) -> None:
        x._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(y, (x,), backward)


# ----------------------------------------------------------------------
# normalization and dropout
# ----------------------------------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs >= 2 features, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered * (var + eps) ** -0.5
    return normalized * gamma + beta


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout; the mask is a pure function of the stream state."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


# ----------------------------------------------------------------------
# multi-head self-attention
# ----------------------------------------------------------------------
@dataclass
class AttentionParams:
    """Projection weights for one self-attention block ([dim, dim] + biases)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", getattr(self, n)) for n in
                ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_attention(dim: int, rng: np.random.Generator, trainable: bool = True) -> AttentionParams:
    def w() -> Tensor:
        return Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=trainable)

    def b() -> Tensor:
        return Tensor(np.zeros(dim), requires_grad=trainable)

    return AttentionParams(wq=w(), wk=w(), wv=w(), wo=w(), bq=b(), bk=b(), bv=b(), bo=b())


def multi_head_self_attention(x: Tensor, heads: int, params: AttentionParams) -> Tensor:
    """Scaled dot-product self-attention over the token axis.

    Accepts [tokens, dim] or [batch, tokens, dim]; no positional encoding,
    so the op is equivariant to token permutations.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, tokens, dim = x.shape
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} not divisible by {heads} heads")
    dh = dim // heads

    # Projections run on [batch*tokens, dim] so each is a single GEMM.
    flat = x.reshape(batch * tokens, dim)

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(batch, tokens, heads, dh).transpose(0, 2, 1, 3)

    q = split_heads(flat @ params.wq + params.bq)
    k = split_heads(flat @ params.wk + params.bk)
    v = split_heads(flat @ params.wv + params.bv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    context = (attn @ v).transpose(0, 2, 1, 3).reshape(batch * tokens, dim)
    out = (context @ params.wo + params.bo).reshape(batch, tokens, dim)
    return out.reshape(tokens, dim) if squeeze else out


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    """Per-parameter Adam moments; step_count advances by 1 per step."""

    first_moment: Array
    second_moment: Array
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, lr: float, **kwargs) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param.data),
            second_moment=np.zeros_like(param.data),
            lr=lr,
            **kwargs,
        )


def adam_step(param: Tensor, grad: Array, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on `param` and `state`."""
    if grad.shape != param.data.shape:
        raise ShapeError(f"grad shape {grad.shape} != param shape {param.data.shape}")
    state.step_count += 1
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    v += (1 - state.beta2) * grad * grad
    denom = np.sqrt(v / (1 - state.beta2**state.step_count))
    denom += state.epsilon
    update = m / denom
    update *= state.lr / (1 - state.beta1**state.step_count)
    param.data -= update


class Adam:
    """Adam over a list of parameters; skips parameters with no gradient."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.states = [
            AdamState.for_param(p, lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
            for p in params
        ]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p, p.grad, s)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
