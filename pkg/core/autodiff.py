"""
Dense tensors with reverse-mode automatic differentiation.

Every primitive records a forward value and an adjoint closure. Calling
``backward`` on a scalar root walks the recorded expression graph once in
reverse topological order, accumulating gradients into leaves that
require them, and then frees the graph.
"""

import logging
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_SUPPORTED_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive"""

    def __init__(self, primitive: str, message: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain"""

    def __init__(self, primitive: str, message: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


def set_default_dtype(name: str) -> None:
    """Select the floating precision used for new tensors ('float64' or 'float32')"""
    global _default_dtype
    if name not in _SUPPORTED_DTYPES:
        raise ValueError(f"Unsupported precision: {name} (expected one of {sorted(_SUPPORTED_DTYPES)})")
    _default_dtype = _SUPPORTED_DTYPES[name]
    logger.debug(f"Default tensor precision set to {name}")


def get_default_dtype():
    return _default_dtype


@contextmanager
def no_grad():
    """Evaluate primitives without recording an expression graph"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense real array participating in a reverse-mode differentiation graph"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = 'leaf'
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- properties -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError('scale', "division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> 'Tensor':
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors"""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              op: str) -> Tensor:
    """
    Create the output node of a primitive

    Args:
        data: Forward value
        parents: Operand tensors, in the order ``backward_fn`` returns gradients
        backward_fn: Maps the output adjoint to one gradient (or None) per parent
        op: Primitive name, used in error messages and graph dumps

    Returns:
        Output tensor, connected to the graph when any parent requires grad
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class ExprGraph:
    """Topologically ordered view of the expression graph below a root"""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Propagate adjoints from the scalar root and free the graph"""
        if self.root.size != 1:
            raise ShapeError('backward', f"root must be scalar, got shape {self.root.shape}")
        adjoints: Dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}

        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = pg if key not in adjoints else adjoints[key] + pg

        for node in self.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every leaf that requires grad"""
    if root.size != 1:
        raise ShapeError('backward', f"root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    ExprGraph(root).backward()


def forward(fn: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    """
    Evaluate an expression and check that it stayed finite

    Args:
        fn: Callable building the expression from tensors
        *args: Positional operands

    Returns:
        The root tensor
    """
    out = fn(*args, **kwargs)
    if not np.all(np.isfinite(out.data)):
        raise DomainError(out.op, "non-finite value produced")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(primitive: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check('add', a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check('subtract', a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), _backward, 'subtract')


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check('multiply', a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), _backward, 'multiply')


def scale(a: Tensor, c: float) -> Tensor:
    def _backward(g):
        return (g * c,)

    return make_node(a.data * c, (a,), _backward, 'scale')


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError('matmul', f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError('matmul', str(e)) from None

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), _backward, 'matmul')


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swaps the last two"""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError('transpose', f"needs at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse_axes = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse_axes),)

    return make_node(np.transpose(a.data, axes), (a,), _backward, 'transpose')


# -- activations -------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def _backward(g):
        return (g * (1.0 - out * out),)

    return make_node(out, (a,), _backward, 'tanh')


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _backward(g):
        return (g * mask,)

    return make_node(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), _backward, 'relu')


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (a,), _backward, 'sigmoid')


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) in the overflow-free form"""
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def _backward(g):
        return (g * expit(a.data),)

    return make_node(out, (a,), _backward, 'softplus')


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError('log', "argument must be strictly positive")

    def _backward(g):
        return (g / a.data,)

    return make_node(np.log(a.data), (a,), _backward, 'log')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _backward(g):
        return (g * out,)

    return make_node(out, (a,), _backward, 'exp')


def clip(a: Tensor, lower: float, upper: float) -> Tensor:
    inside = (a.data >= lower) & (a.data <= upper)

    def _backward(g):
        return (g * inside,)

    return make_node(np.clip(a.data, lower, upper), (a,), _backward, 'clip')


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis"""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (a,), _backward, 'softmax')


def log_softmax(a: Tensor) -> Tensor:
    out = a.data - logsumexp(a.data, axis=-1, keepdims=True)

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (a,), _backward, 'log_softmax')


# -- normalization -----------------------------------------------------------

def normalize(a: Tensor, axes: Sequence[int] = (-1,), eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardization over ``axes`` (biased variance)"""
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    std = np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered / std

    def _backward(g):
        g_mean = g.sum(axis=axes, keepdims=True) / count
        gx_mean = (g * xhat).sum(axis=axes, keepdims=True) / count
        return ((g - g_mean - xhat * gx_mean) / std,)

    return make_node(xhat, (a,), _backward, 'normalize')


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError('layer_norm', f"affine parameters must have shape ({a.shape[-1]},)")
    return add(mul(normalize(a, (-1,), eps), gamma), beta)


# -- convolution and pooling -------------------------------------------------

def conv2d(x: Tensor, w: Tensor, groups: int = 1) -> Tensor:
    """
    Stride-1 2-D convolution with zero padding of floor(k/2) on channels-last input

    Args:
        x: Input of shape (B, H, W, C_in)
        w: Kernel of shape (k, k, C_in // groups, C_out), k odd
        groups: 1 for a dense convolution or C_in for a depthwise one

    Returns:
        Output of shape (B, H, W, C_out)
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError('conv2d', f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ShapeError('conv2d', f"kernel must be square with odd extent, got {w.shape[:2]}")
    c_in = x.shape[3]
    depthwise = groups != 1
    if depthwise:
        if groups != c_in or w.shape[2] != 1 or w.shape[3] != c_in:
            raise ShapeError('conv2d', f"depthwise kernel for {c_in} channels must be (k, k, 1, {c_in}), got {w.shape}")
    elif w.shape[2] != c_in:
        raise ShapeError('conv2d', f"kernel expects {w.shape[2]} input channels, input has {c_in}")

    p = k // 2
    pad = ((0, 0), (p, p), (p, p), (0, 0))
    B, H, W = x.shape[:3]
    N = B * H * W
    cols = _im2col(x.data, k, pad)
    if depthwise:
        kernel = w.data[:, :, 0, :].reshape(k * k, c_in)
        out = np.einsum('nkc,kc->nc', cols, kernel)
    else:
        out = cols.reshape(N, -1) @ w.data.reshape(k * k * c_in, -1)
    out = out.reshape(B, H, W, -1)

    def _backward(g):
        g_cols = _im2col(g, k, pad)
        g_rows = g.reshape(N, -1)
        if depthwise:
            flipped = w.data[::-1, ::-1, 0, :].reshape(k * k, c_in)
            gx = np.einsum('nkc,kc->nc', g_cols, flipped)
            gw = np.einsum('nkc,nc->kc', cols, g_rows).reshape(k, k, 1, c_in)
        else:
            c_out = w.shape[3]
            flipped = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * c_out, c_in)
            gx = g_cols.reshape(N, -1) @ flipped
            gw = (cols.reshape(N, -1).T @ g_rows).reshape(w.shape)
        return gx.reshape(x.shape), gw

    return make_node(out, (x, w), _backward, 'conv2d')


def _im2col(a: np.ndarray, k: int, pad) -> np.ndarray:
    """Contiguous (B*H*W, k*k, C) patch matrix of a zero-padded (B, H, W, C) map"""
    windows = sliding_window_view(np.pad(a, pad), (k, k), axis=(1, 2))
    B, H, W, C = windows.shape[:4]
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k, C)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a (B, H, W, C) map"""
    if x.ndim != 4:
        raise ShapeError('global_avg_pool', f"expected (B, H, W, C), got {x.shape}")
    return mean(x, axis=(1, 2))


# -- structural --------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', f"cannot reshape {a.shape} into {shape}") from None
    original = a.shape

    def _backward(g):
        return (g.reshape(original),)

    return make_node(out, (a,), _backward, 'reshape')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError('concat', "nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError('concat', str(e)) from None
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return make_node(out, tuple(tensors), _backward, 'concat')


def gather(a: Tensor, index: Sequence[int], axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by an index list (repeats allowed)"""
    idx = np.asarray(index, dtype=np.intp)
    extent = a.shape[axis]
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= extent)):
        raise ShapeError('gather', f"indices must lie in [0, {extent})")

    def _backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return make_node(np.take(a.data, idx, axis=axis), (a,), _backward, 'gather')


# -- reductions --------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _backward, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)

    def _backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return make_node(out, (a,), _backward, 'mean')


def max_reduce(a: Tensor, axis: int = 0) -> Tensor:
    """Maximum along one axis; the adjoint goes to the first maximizer"""
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)

    def _backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return make_node(out, (a,), _backward, 'max')


def sq_norm(a: Tensor) -> Tensor:
    """Squared L2 (Frobenius) norm"""
    def _backward(g):
        return (2.0 * g * a.data,)

    return make_node(np.asarray(np.sum(a.data * a.data)), (a,), _backward, 'sq_norm')


# -- verification ------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_elements: int = 64, seed: int = 0) -> float:
    """
    Compare analytic gradients against central finite differences

    Non-scalar outputs are contracted with a fixed random weighting so every
    output element contributes. Only inputs with ``requires_grad`` are checked.

    Args:
        fn: Expression builder taking the inputs as tensors
        inputs: Operand tensors (converted to double precision copies)
        eps: Finite-difference step
        max_elements: Upper bound on the number of checked elements
        seed: Seed of the output weighting

    Returns:
        max |analytic - numeric| / max(1, |numeric|); 0.0 when nothing is checked
    """
    probes = [Tensor(t.data, requires_grad=t.requires_grad, dtype=np.float64) for t in inputs]
    checked = sum(t.size for t in probes if t.requires_grad)
    if checked > max_elements:
        raise ValueError(f"grad_check: {checked} elements exceed the limit of {max_elements}")

    with no_grad():
        probe_out = fn(*probes)
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe_out.shape)

    def objective() -> Tensor:
        return tensor_sum(mul(fn(*probes), Tensor(weights)))

    root = objective()
    backward(root)
    worst = 0.0
    for t in probes:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                plus = objective().item()
                flat[i] = original - eps
                minus = objective().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
