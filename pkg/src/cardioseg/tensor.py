"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays. Differentiable operations record
themselves on the active :class:`Tape`; ``Tensor.backward`` replays the
recorded operations exactly once, in reverse record order, accumulating
gradients on every reachable tensor whose ``requires_grad`` flag is set.

Tensors are never mutated by operations: every op allocates a fresh output
buffer, and gradients accumulate in a separate ``grad`` buffer. A tape is
single use; recording onto a tape that has already run backward raises,
which turns accidental graph growth across optimizer steps into an error.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NumericError",
    "apply_op",
    "active_tape",
    "matmul",
    "concat",
]


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class TapeError(RuntimeError):
    """Gradient tape misuse: detached loss, double backward, stale tape."""


class NumericError(ArithmeticError):
    """An explicit finiteness check found NaN or Inf."""


_TAPES: list["Tape"] = []


def active_tape():
    """The innermost open tape, or None when not recording."""
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Operations append in execution order, so the list is topologically
    sorted by construction: an operation's inputs were recorded (or are
    leaves) before the operation itself. ``run_backward`` walks the list
    once, in reverse.
    """

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out, inputs, backward_fn):
        if self._consumed:
            raise TapeError(
                "tape already consumed by backward; call reset() before "
                "recording new operations"
            )
        self._ops.append((out, inputs, backward_fn))

    def reset(self):
        """Discard the recorded graph and allow the tape to be reused."""
        self._ops.clear()
        self._consumed = False

    def run_backward(self, loss):
        if self._consumed:
            raise TapeError("backward already ran on this tape; reset() first")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._ops):
            if out.grad is None:
                continue  # not reachable from the loss
            grads = backward_fn(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad
        self._consumed = True


class Tensor:
    """N-dimensional float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)  # copy: callers keep ownership
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # Internal constructor for freshly allocated op outputs (no copy).
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        return t

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, name="tensor"):
        """Explicit NaN/Inf check; values are otherwise stored unvalidated."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NumericError(f"{name}: {bad} non-finite value(s) detected")
        return self

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        if self.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        if self._tape is None:
            raise TapeError(
                "loss is detached: it was not recorded on an active tape"
            )
        self._tape.run_backward(self)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- shaping and reductions ---------------------------------------------

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def apply_op(out_data, inputs, backward_fn):
    """Wrap an op result, recording it when a tape is open and needed.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, already reduced to each input's shape.
    """
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs_grad)
    if needs_grad:
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ops --------------------------------------------------------


def add(a, b):
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return apply_op(a.data * b.data, (a, b), backward)


def div(a, b):
    _check_broadcast(a, b, "div")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return apply_op(a.data / b.data, (a, b), backward)


def neg(a):
    def backward(g):
        return (-g,)

    return apply_op(-a.data, (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return apply_op(out_data, (a,), backward)


def log(a):
    def backward(g):
        return (g / a.data,)

    return apply_op(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out_data),)

    return apply_op(out_data, (a,), backward)


# -- matmul -----------------------------------------------------------------


def matmul(a, b):
    """Matrix product; 2-D or batched with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul leading (batch) dims must match: {a.shape} x {b.shape}"
        )

    def backward(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return apply_op(np.matmul(a.data, b.data), (a, b), backward)


# -- shaping ----------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    old_shape = a.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return apply_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return apply_op(np.transpose(a.data, axes), (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = int(axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (int(axis),)
    axes = tuple(sorted(ax % ndim if -ndim <= ax < ndim else _bad_axis(ax, ndim)
                        for ax in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return axes


def _bad_axis(ax, ndim):
    raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape

    def backward(g):
        return (_expand_reduced(g, in_shape, axes, keepdims).copy(),)

    return apply_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape
    count = int(np.prod([in_shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        return (_expand_reduced(g, in_shape, axes, keepdims) / count,)

    return apply_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; gradient routes to the first (lowest linear index) max."""
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape
    kept = [ax for ax in range(a.ndim) if ax not in axes]
    # Move reduced axes (in original relative order) to the back so that the
    # flat argmax below matches row-major linear-index tie-breaking.
    perm = kept + list(axes)
    moved = np.transpose(a.data, perm)
    lead_shape = moved.shape[: len(kept)]
    red = int(np.prod(moved.shape[len(kept):])) if axes else 1
    flat = moved.reshape(lead_shape + (red,))
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(lead_shape + (1,)), -1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(perm)),)

    if keepdims:
        shaped = out_data.reshape(
            tuple(1 if ax in axes else in_shape[ax] for ax in range(a.ndim))
        )
    else:
        shaped = out_data.reshape(tuple(in_shape[ax] for ax in kept))

    def backward_shaped(g):
        return backward(g.reshape(lead_shape))

    return apply_op(shaped, (a,), backward_shaped)
