"""
Reverse-mode automatic differentiation on an append-only tape, dense MLPs, Adam, and HGW1 checkpoints.

Every tape node holds a float64 numpy array; each array element is one scalar of the
record. A node's vector-Jacobian product is itself written with tape primitives, so a
reverse sweep is recorded on the same tape and can be differentiated again
(parameter gradients of input-gradient losses).
"""

import struct
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'HGW1'

VjpFn = Callable[['Var', 'Var'], Sequence[Optional['Var']]]


@dataclass
class _Node:
    op: str
    value: np.ndarray
    parents: Tuple[int, ...] = ()
    vjp: Optional[VjpFn] = None


class Tape:
    """Append-only record of primitive operations"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, value, parents: Tuple[int, ...] = (), vjp: Optional[VjpFn] = None) -> 'Var':
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(op, value, parents, vjp))
        return Var(self, len(self.nodes) - 1)

    def variable(self, value) -> 'Var':
        """Leaf that gradients can be taken with respect to"""
        return self._append('leaf', np.array(value, dtype=np.float64))

    def constant(self, value) -> 'Var':
        return self._append('const', np.array(value, dtype=np.float64))

    def owns(self, v: 'Var') -> bool:
        return isinstance(v, Var) and v.tape is self and 0 <= v.index < len(self.nodes)

    def _relevant(self, wrt: Sequence['Var'], upto: int) -> set:
        """Indices of nodes that depend on any wrt node"""
        relevant = {w.index for w in wrt}
        if not relevant:
            return relevant
        for i in range(min(relevant), upto + 1):
            if i in relevant:
                continue
            if any(parent in relevant for parent in self.nodes[i].parents):
                relevant.add(i)
        return relevant

    def gradient(self, output: 'Var', wrt: Sequence['Var'], seed: Optional['Var'] = None) -> List['Var']:
        """
        Reverse sweep from output to each node in wrt.

        The sweep itself is recorded, so the returned Vars are differentiable.
        A scalar output is seeded with 1; otherwise pass a seed of output's shape.
        """
        if not self.owns(output):
            raise TapeError("Output is not recorded on this tape")
        for w in wrt:
            if not self.owns(w):
                raise TapeError("Gradient target is not recorded on this tape")
        if seed is None:
            if output.value.size != 1:
                raise TapeError(f"Output must be scalar, got shape {output.shape}")
            seed = self.constant(np.ones_like(output.value))
        elif seed.shape != output.shape:
            raise ShapeError(f"Seed shape {seed.shape} does not match output shape {output.shape}")

        relevant = self._relevant(wrt, output.index)
        cotangents = {output.index: seed}
        for i in range(output.index, -1, -1):
            g = cotangents.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None or not node.parents:
                continue
            if not any(parent in relevant for parent in node.parents):
                continue
            parent_grads = node.vjp(g, Var(self, i))
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent not in relevant:
                    continue
                if parent in cotangents:
                    cotangents[parent] = add(cotangents[parent], pg)
                else:
                    cotangents[parent] = pg

        results = []
        for w in wrt:
            g = cotangents.get(w.index)
            results.append(g if g is not None else self.constant(np.zeros_like(w.value)))
        return results


Operand = Union['Var', float, int, np.ndarray]


class Var:
    """Handle to a tape node"""

    __slots__ = ('tape', 'index')

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def op(self) -> str:
        return self.tape.nodes[self.index].op

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, index={self.index})"

    def __add__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Var':
        return self.__add__(other)

    def __sub__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return add_scalar(neg(self), float(other))
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Var':
        return self.__mul__(other)

    def __truediv__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(_lift(self.tape, other)))

    def __rtruediv__(self, other: Operand) -> 'Var':
        if _is_scalar(other):
            return scale(reciprocal(self), float(other))
        return mul(_lift(self.tape, other), reciprocal(self))

    def __neg__(self) -> 'Var':
        return neg(self)

    def __matmul__(self, other: 'Var') -> 'Var':
        return matmul(self, other)

    def __getitem__(self, key) -> 'Var':
        return index(self, key)

    @property
    def T(self) -> 'Var':
        return transpose(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _lift(tape: Tape, x: Operand) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("Cannot combine variables from different tapes")
        return x
    return tape.constant(x)


def _pair(a: Operand, b: Operand) -> Tuple[Var, Var]:
    tape = a.tape if isinstance(a, Var) else b.tape if isinstance(b, Var) else None
    if tape is None:
        raise TapeError("At least one operand must be a tape variable")
    return _lift(tape, a), _lift(tape, b)


def _sum_to_shape(value: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast array back down to shape"""
    while value.ndim > len(shape):
        value = value.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and value.shape[axis] != 1:
            value = value.sum(axis=axis, keepdims=True)
    return value


# primitives

def add(a: Operand, b: Operand) -> Var:
    a, b = _pair(a, b)
    return a.tape._append('add', a.value + b.value, (a.index, b.index),
                          lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a: Operand, b: Operand) -> Var:
    a, b = _pair(a, b)
    return a.tape._append('sub', a.value - b.value, (a.index, b.index),
                          lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def add_scalar(a: Var, c: float) -> Var:
    return a.tape._append('add_scalar', a.value + c, (a.index,), lambda g, out: (g,))


def neg(a: Var) -> Var:
    return a.tape._append('neg', -a.value, (a.index,), lambda g, out: (neg(g),))


def scale(a: Var, c: float) -> Var:
    return a.tape._append('scale', c * a.value, (a.index,), lambda g, out: (scale(g, c),))


def mul(a: Operand, b: Operand) -> Var:
    a, b = _pair(a, b)
    return a.tape._append('mul', a.value * b.value, (a.index, b.index),
                          lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def matmul(a: Var, b: Var) -> Var:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a.tape._append('matmul', a.value @ b.value, (a.index, b.index),
                          lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a: Var) -> Var:
    return a.tape._append('transpose', a.value.T.copy(), (a.index,), lambda g, out: (transpose(g),))


def tanh(a: Var) -> Var:
    return a.tape._append('tanh', np.tanh(a.value), (a.index,),
                          lambda g, out: (mul(g, 1.0 - mul(out, out)),))


def sigmoid(a: Var) -> Var:
    value = _np_sigmoid(a.value)
    return a.tape._append('sigmoid', value, (a.index,),
                          lambda g, out: (mul(g, mul(out, 1.0 - out)),))


def softplus(a: Var) -> Var:
    return a.tape._append('softplus', np.logaddexp(0.0, a.value), (a.index,),
                          lambda g, out: (mul(g, sigmoid(a)),))


def log(a: Var) -> Var:
    return a.tape._append('log', np.log(a.value), (a.index,),
                          lambda g, out: (mul(g, reciprocal(a)),))


def reciprocal(a: Var) -> Var:
    return a.tape._append('reciprocal', 1.0 / a.value, (a.index,),
                          lambda g, out: (neg(mul(g, mul(out, out))),))


def abs_(a: Var) -> Var:
    """|a| with subgradient 0 at 0"""
    sign = np.sign(a.value)
    return a.tape._append('abs', np.abs(a.value), (a.index,),
                          lambda g, out: (mul(g, a.tape.constant(sign)),))


def clip(a: Var, low: float, high: float) -> Var:
    mask = ((a.value >= low) & (a.value <= high)).astype(np.float64)
    return a.tape._append('clip', np.clip(a.value, low, high), (a.index,),
                          lambda g, out: (mul(g, a.tape.constant(mask)),))


def sum_(a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return a.tape._append('sum', value, (a.index,), vjp)


def mean(a: Var, axis: Optional[int] = None) -> Var:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / count)


def sum_to(a: Var, shape: Tuple[int, ...]) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return a.tape._append('sum_to', _sum_to_shape(a.value, shape), (a.index,),
                          lambda g, out: (broadcast_to(g, a.shape),))


def broadcast_to(a: Var, shape: Tuple[int, ...]) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return a.tape._append('broadcast_to', np.broadcast_to(a.value, shape).copy(), (a.index,),
                          lambda g, out: (sum_to(g, a.shape),))


def reshape(a: Var, shape: Tuple[int, ...]) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return a.tape._append('reshape', a.value.reshape(shape), (a.index,),
                          lambda g, out: (reshape(g, a.shape),))


def index(a: Var, key) -> Var:
    return a.tape._append('index', np.array(a.value[key]), (a.index,),
                          lambda g, out: (scatter(g, key, a.shape),))


def scatter(a: Var, key, shape: Tuple[int, ...]) -> Var:
    """Zeros of shape with a added at key (adjoint of index)"""
    value = np.zeros(shape)
    np.add.at(value, key, a.value)
    return a.tape._append('scatter', value, (a.index,), lambda g, out: (index(g, key),))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    parts = list(parts)
    tape = parts[0].tape
    for part in parts:
        if part.tape is not tape:
            raise TapeError("Cannot concatenate variables from different tapes")
    value = np.concatenate([p.value for p in parts], axis=axis)
    ndim = value.ndim
    axis = axis % ndim
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g, out):
        grads = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            key = tuple([slice(None)] * axis + [slice(int(start), int(stop))])
            grads.append(index(g, key))
        return tuple(grads)

    return tape._append('concat', value, tuple(p.index for p in parts), vjp)


def affine(x: Var, W: Var, b: Var) -> Var:
    """x @ W + b for x of shape (batch, fan_in)"""
    return add(matmul(x, W), b)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# networks

class Activation(str, Enum):
    TANH = 'tanh'
    SOFTPLUS = 'softplus'

    @classmethod
    def parse(cls, value) -> 'Activation':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"Unsupported activation: {value} (only smooth tanh/softplus)")


def _np_activation(activation: Activation, x: np.ndarray) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(x)
    return np.logaddexp(0.0, x)


def _np_activation_derivative(activation: Activation, x: np.ndarray) -> np.ndarray:
    if activation == Activation.TANH:
        return 1.0 - np.tanh(x) ** 2
    return _np_sigmoid(x)


def _tape_activation(activation: Activation, x: Var) -> Var:
    return tanh(x) if activation == Activation.TANH else softplus(x)


class Mlp:
    """
    Dense network: affine + activation on every hidden layer, linear output layer.
    Weights are (fan_in, fan_out) matrices; θ is all layers flattened in order (W then b).
    """

    def __init__(self, widths: Sequence[int], activation=Activation.TANH, seed: int = 0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ShapeError(f"Invalid layer widths: {widths}")
        self.widths = widths
        self.activation = Activation.parse(activation)
        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]))

    def parameters(self) -> np.ndarray:
        chunks = []
        for W, b in zip(self.weights, self.biases):
            chunks.append(W.reshape(-1))
            chunks.append(b)
        return np.concatenate(chunks)

    def set_parameters(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != self.param_count:
            raise ShapeError(f"Expected {self.param_count} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise NumericalError("Non-finite network parameters")
        offset = 0
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.weights[i] = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            offset += fan_in * fan_out
            self.biases[i] = theta[offset:offset + fan_out].copy()
            offset += fan_out

    def copy(self) -> 'Mlp':
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.activation = self.activation
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in or x.ndim not in (1, 2):
            raise ShapeError(f"Network expects input width {self.d_in}, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Numeric forward pass for x of shape (d_in,) or (batch, d_in)"""
        x = self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = _np_activation(self.activation, h)
        return h

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """Numeric ∂output/∂x for a scalar head, same leading shape as x"""
        if self.d_out != 1:
            raise ShapeError(f"input_gradient needs a scalar head, network has {self.d_out} outputs")
        x = self._check_input(x)
        single = x.ndim == 1
        h = x[None, :] if single else x
        pre_activations = []
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < last:
                pre_activations.append(z)
                h = _np_activation(self.activation, z)
        g = np.ones((h.shape[0], 1))
        for i in range(last, -1, -1):
            g = g @ self.weights[i].T
            if i > 0:
                g = g * _np_activation_derivative(self.activation, pre_activations[i - 1])
        return g[0] if single else g

    def operator_norm_bound(self) -> float:
        """Product of layer spectral norms; a Lipschitz bound for 1-Lipschitz activations"""
        bound = 1.0
        for W in self.weights:
            bound *= float(np.linalg.norm(W, 2))
        return bound

    def bind(self, tape: Tape) -> 'BoundMlp':
        return BoundMlp(self, tape)


class BoundMlp:
    """An Mlp whose parameters are leaves on a tape"""

    def __init__(self, net: Mlp, tape: Tape):
        self.net = net
        self.tape = tape
        self.weights = [tape.variable(W) for W in net.weights]
        self.biases = [tape.variable(b) for b in net.biases]

    def parameters(self) -> List[Var]:
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def __call__(self, x: Operand) -> Var:
        x = _lift(self.tape, x)
        if x.value.ndim == 1:
            x = reshape(x, (1, x.shape[0]))
        if x.shape[-1] != self.net.d_in:
            raise ShapeError(f"Network expects input width {self.net.d_in}, got shape {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = affine(h, W, b)
            if i < last:
                h = _tape_activation(self.net.activation, h)
        return h

    def input_gradient(self, x: Operand) -> Var:
        """∂output/∂x per row, recorded so it stays differentiable in θ"""
        if self.net.d_out != 1:
            raise ShapeError(f"input_gradient needs a scalar head, network has {self.net.d_out} outputs")
        x = _lift(self.tape, x)
        if x.value.ndim == 1:
            x = reshape(x, (1, x.shape[0]))
        total = sum_(self(x))
        return self.tape.gradient(total, [x])[0]

    def flat_gradient(self, grads: Sequence[Var]) -> np.ndarray:
        return np.concatenate([g.value.reshape(-1) for g in grads])


def forward(net: Mlp, x, bound: Optional[BoundMlp] = None):
    """Numeric output, or a recorded Var when bound to a tape"""
    if bound is None:
        return net.forward(x)
    return bound(x)


def input_gradient(net: Mlp, x, bound: Optional[BoundMlp] = None):
    if bound is None:
        return net.input_gradient(x)
    return bound.input_gradient(x)


def parameter_gradient(tape: Tape, loss: Var, params: Sequence[Var]) -> np.ndarray:
    """∂loss/∂θ flattened in parameter order"""
    if not tape.owns(loss):
        raise TapeError("Loss is not recorded on this tape")
    if loss.value.size != 1:
        raise TapeError(f"Loss must be scalar, got shape {loss.shape}")
    grads = tape.gradient(loss, list(params))
    return np.concatenate([g.value.reshape(-1) for g in grads]) if grads else np.zeros(0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps}


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> 'AdamMoments':
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_update(theta: np.ndarray, grad: np.ndarray, moments: AdamMoments,
                hyper: AdamHyper = AdamHyper()) -> Tuple[np.ndarray, AdamMoments]:
    """One bias-corrected adaptive-moment step"""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape or moments.m.shape != theta.shape:
        raise ShapeError(f"Adam shapes disagree: theta {theta.shape}, grad {grad.shape}, m {moments.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("Non-finite gradient in Adam update", stage='adam')
    t = moments.t + 1
    m = hyper.beta1 * moments.m + (1 - hyper.beta1) * grad
    v = hyper.beta2 * moments.v + (1 - hyper.beta2) * grad ** 2
    m_hat = m / (1 - hyper.beta1 ** t)
    v_hat = v / (1 - hyper.beta2 ** t)
    theta_new = theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return theta_new, AdamMoments(m, v, t)


@dataclass
class Optimizer:
    """Adam state for one network"""
    net: Mlp
    hyper: AdamHyper = field(default_factory=AdamHyper)
    moments: Optional[AdamMoments] = None

    def __post_init__(self):
        if self.moments is None:
            self.moments = AdamMoments.zeros(self.net.param_count)

    def step(self, grad: np.ndarray):
        theta, self.moments = adam_update(self.net.parameters(), grad, self.moments, self.hyper)
        self.net.set_parameters(theta)


def save_checkpoint(net: Mlp, path: str):
    """HGW1: magic, width count and widths as <u4, then θ as <f8"""
    header = CHECKPOINT_MAGIC + struct.pack('<I', len(net.widths)) + struct.pack(f'<{len(net.widths)}I', *net.widths)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(net.parameters().astype('<f8').tobytes())
    logger.debug(f"Saved {net.param_count} parameters to {path}")


def load_checkpoint(path: str, activation=Activation.TANH) -> Mlp:
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not an HGW1 checkpoint")
    (count,) = struct.unpack('<I', data[4:8])
    widths = list(struct.unpack(f'<{count}I', data[8:8 + 4 * count]))
    net = Mlp(widths, activation)
    theta = np.frombuffer(data[8 + 4 * count:], dtype='<f8')
    if theta.size != net.param_count:
        raise ShapeError(f"{path} holds {theta.size} parameters, widths {widths} need {net.param_count}")
    net.set_parameters(theta.astype(np.float64))
    return net
