"""Dense float64 tensors with reverse-mode autodiff and a gradient optimizer.

The graph is built eagerly: every operation on a grad-requiring tensor
records a closure that scatters the output gradient back to its parents.
``Tensor.backward`` walks the graph once in reverse topological order.
Gradients accumulate on leaves until explicitly cleared, matching the
usual autodiff contract.
"""

import contextlib

import numpy as np

from .errors import ContractError, DomainError, PoisonedStateError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dim broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus optional gradient buffer and graph edges."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.data.shape}")
        return float(self.data.ravel()[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, no graph, no gradient."""
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Backpropagate from a scalar loss to every grad-requiring leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        # Iterative topological sort; graphs can be thousands of nodes deep.
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        # Interior grads are scratch space: clear them so repeated backward
        # calls accumulate correctly on leaves only.
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- elementwise arithmetic ----------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out = Tensor._result(self.data + other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.data.shape))

        if out._parents:
            out._backward = backward
        return out

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor._result(self.data * other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape))

        if out._parents:
            out._backward = backward
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_lift(other))

    def __radd__(self, other):
        return self + other

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __rmul__(self, other):
        return self * other

    def __matmul__(self, other):
        return matmul(self, other)

    # -- nonlinearities -------------------------------------------------

    def tanh(self) -> "Tensor":
        out = Tensor._result(np.tanh(self.data), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * (1.0 - out.data * out.data))

        if out._parents:
            out._backward = backward
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor._result(value, (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * out.data * (1.0 - out.data))

        if out._parents:
            out._backward = backward
        return out

    def exp(self) -> "Tensor":
        out = Tensor._result(np.exp(self.data), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * out.data)

        if out._parents:
            out._backward = backward
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log requires strictly positive values")
        out = Tensor._result(np.log(self.data), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad / self.data)

        if out._parents:
            out._backward = backward
        return out

    def clamp(self, low: float, high: float) -> "Tensor":
        if low > high:
            raise ContractError(f"clamp bounds inverted: [{low}, {high}]")
        mask = (self.data >= low) & (self.data <= high)
        out = Tensor._result(np.clip(self.data, low, high), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        if out._parents:
            out._backward = backward
        return out

    def softmax(self) -> "Tensor":
        """Stable softmax over a 1-D tensor; outputs sum to 1."""
        if self.data.ndim != 1 or self.data.size == 0:
            raise ShapeError(
                f"softmax requires a non-empty 1-D tensor, got shape {self.data.shape}"
            )
        shifted = self.data - self.data.max()
        e = np.exp(shifted)
        p = e / e.sum()
        out = Tensor._result(p, (self,), None)

        def backward():
            if self.requires_grad:
                g = out.grad
                self._accumulate(out.data * (g - np.dot(g, out.data)))

        if out._parents:
            out._backward = backward
        return out

    # -- reductions and reshaping ----------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor._result(self.data.sum(), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(np.broadcast_to(out.grad, self.data.shape).copy())

        if out._parents:
            out._backward = backward
        return out

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, shape) -> "Tensor":
        out = Tensor._result(self.data.reshape(shape), (self,), None)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.data.shape))

        if out._parents:
            out._backward = backward
        return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product with gradient support for ndim <= 2 operands."""
    a, b = _lift(a), _lift(b)
    if not (1 <= a.ndim <= 2 and 1 <= b.ndim <= 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor._result(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            if a.ndim == 2 and b.ndim == 2:
                a._accumulate(g @ b.data.T)
            elif a.ndim == 2:  # (m,k) @ (k,) -> (m,)
                a._accumulate(np.outer(g, b.data))
            elif b.ndim == 2:  # (k,) @ (k,n) -> (n,)
                a._accumulate(b.data @ g)
            else:  # (k,) @ (k,) -> scalar
                a._accumulate(g * b.data)
        if b.requires_grad:
            if a.ndim == 2 and b.ndim == 2:
                b._accumulate(a.data.T @ g)
            elif a.ndim == 2:
                b._accumulate(a.data.T @ g)
            elif b.ndim == 2:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(g * a.data)

    if out._parents:
        out._backward = backward
    return out


def stack(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor (one per row)."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack requires at least one tensor")
    width = tensors[0].size
    for t in tensors:
        if t.ndim != 1 or t.size != width:
            raise ShapeError("stack requires 1-D tensors of equal length")
    out = Tensor._result(np.stack([t.data for t in tensors]), tuple(tensors), None)

    def backward():
        for row, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(out.grad[row])

    if out._parents:
        out._backward = backward
    return out


class GradientOptimizer:
    """Adaptive-moment parameter updates with a plain-SGD fallback mode.

    Moment buffers are bias-corrected; ``step`` consumes whatever gradients
    the tensors currently hold (missing gradients leave the parameter
    untouched).
    """

    def __init__(self, params, learning_rate: float = 1e-3,
                 betas=(0.9, 0.999), epsilon: float = 1e-8, mode: str = "adam"):
        if learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if mode not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer mode: {mode!r}")
        if isinstance(params, dict):
            params = list(params.items())
        else:
            params = list(params)
        self.params = params
        self.learning_rate = learning_rate
        self.betas = betas
        self.epsilon = epsilon
        self.mode = mode
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(p.data) for name, p in params}
        self.second_moment = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        beta1, beta2 = self.betas
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise PoisonedStateError(f"non-finite gradient for parameter {name!r}")
            if self.mode == "sgd":
                p.data -= self.learning_rate * g
                continue
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            m_hat = m / (1.0 - beta1 ** self.step_count)
            v_hat = v / (1.0 - beta2 ** self.step_count)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
