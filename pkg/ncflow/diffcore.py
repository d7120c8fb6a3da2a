"""
Differentiation engine for ncflow

A closed set of float64 primitives, each with exact forward, JVP and reverse
rules supplied by XLA, plus the four entry points the rest of the package
differentiates through: `evaluate`, `grad`, `jvp` and `jvp_nested`.

Forward-mode calls may nest at most `MAX_FORWARD_DEPTH` levels; reverse mode may
wrap any of them once. That is exactly what a second-order Taylor field
trained by gradient descent requires.

Example::

    from ncflow import diffcore as dc

    f = dc.DiffFunction(lambda x: dc.sum_(dc.square(x)), (3,))
    dc.grad(f, jnp.array([1.0, 2.0, 3.0]))         # -> [2., 4., 6.]
    dc.jvp(f, jnp.ones(3), jnp.array([1.0, 0.0, 0.0]))  # -> (3., 2.)
"""

import contextlib
import contextvars
import logging
import re
from typing import *

import jax
import jax.numpy as jnp

from .core import NestingError, NonFiniteError, ShapeError, Tensor

logger = logging.getLogger(__name__)

MAX_FORWARD_DEPTH = 2
"""Deepest supported forward-over-forward nesting"""

_forward_depth: contextvars.ContextVar[int] = contextvars.ContextVar(
    "ncflow_forward_depth", default=0
)
_NAN_PRIMITIVE = re.compile(r"encountered in (\w+)")


def as_tensor(value: Any) -> Tensor:
    """Convert any array-like to a float64 tensor"""
    return jnp.asarray(value, dtype=jnp.float64)


### Primitives ###
def _binary_shapes(name: str, a: Tensor, b: Tensor):
    a_shape, b_shape = jnp.shape(a), jnp.shape(b)
    if a_shape != b_shape and a_shape != () and b_shape != ():
        raise ShapeError(f"{name}: operand shapes {a_shape} and {b_shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    return jnp.add(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    return jnp.subtract(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    return jnp.multiply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return jnp.multiply(a, factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a_shape, b_shape = jnp.shape(a), jnp.shape(b)
    if not a_shape or not b_shape:
        raise ShapeError(f"matmul: scalar operand {a_shape} @ {b_shape}")
    inner_a = a_shape[-1]
    inner_b = b_shape[0] if len(b_shape) == 1 else b_shape[-2]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: contraction mismatch {a_shape} @ {b_shape}")
    return jnp.matmul(a, b)


def concatenate(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ranks = {jnp.ndim(part) for part in parts}
    if len(ranks) != 1:
        raise ShapeError(f"concatenate: operands of mixed rank {sorted(ranks)}")
    return jnp.concatenate(parts, axis=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    size = 1
    for extent in shape:
        size *= extent
    if -1 not in shape and size != jnp.size(a):
        raise ShapeError(f"reshape: cannot view {jnp.shape(a)} as {tuple(shape)}")
    return jnp.reshape(a, shape)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    extent = jnp.shape(a)[axis]
    if not 0 <= start <= stop <= extent:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for extent {extent}")
    return jax.lax.slice_in_dim(a, start, stop, axis=axis)


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return jnp.sum(a, axis=axis)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return jnp.mean(a, axis=axis)


def abs_(a: Tensor) -> Tensor:
    return jnp.abs(a)


def square(a: Tensor) -> Tensor:
    return jnp.square(a)


def sin(a: Tensor) -> Tensor:
    return jnp.sin(a)


def cos(a: Tensor) -> Tensor:
    return jnp.cos(a)


def exp(a: Tensor) -> Tensor:
    return jnp.exp(a)


def tanh(a: Tensor) -> Tensor:
    return jnp.tanh(a)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), i.e. Swish with beta = 1"""
    return jax.nn.silu(a)


def identity(a: Tensor) -> Tensor:
    return a


UNARY_PRIMITIVES: Dict[str, Callable[[Tensor], Tensor]] = {
    "abs": abs_,
    "square": square,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "tanh": tanh,
    "swish": swish,
    "identity": identity,
}
"""Elementwise primitives by name; activations are looked up here"""

BINARY_PRIMITIVES: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
}


class DiffFunction:
    """Differentiable mapping from tensors to a tensor

    Arguments:
        fn (Callable): Function composed from this module's primitives
        *in_shapes (Tuple[int, ...]): Declared input shapes; omitted means unchecked
        name (Optional[str]): Name used in error messages
    """

    def __init__(self, fn: Callable[..., Tensor], *in_shapes: Sequence[int], name: Optional[str] = None):
        self.fn = fn
        self.in_shapes = tuple(tuple(shape) for shape in in_shapes)
        self.name = name or getattr(fn, "__name__", "function")

    def check_inputs(self, inputs: Sequence[Tensor]):
        if not self.in_shapes:
            return
        if len(inputs) != len(self.in_shapes):
            raise ShapeError(
                f"{self.name}: expected {len(self.in_shapes)} inputs, got {len(inputs)}"
            )
        for position, (tensor, shape) in enumerate(zip(inputs, self.in_shapes)):
            if tuple(jnp.shape(tensor)) != shape:
                raise ShapeError(
                    f"{self.name}: input {position} has shape {tuple(jnp.shape(tensor))}, expected {shape}"
                )

    def __call__(self, *inputs: Tensor) -> Tensor:
        return evaluate(self, *inputs)

    def __repr__(self):
        return f"DiffFunction({self.name}, in_shapes={self.in_shapes})"


Differentiable = Union[DiffFunction, Callable[..., Tensor]]
"""Anything the engine can differentiate: a `DiffFunction` or a plain primitive composition"""


def _unwrap(f: Differentiable) -> Callable[..., Tensor]:
    return f.fn if isinstance(f, DiffFunction) else f


def _prepare(f: Differentiable, inputs: Sequence[Any]) -> Tuple[Tensor, ...]:
    tensors = tuple(as_tensor(value) for value in inputs)
    if isinstance(f, DiffFunction):
        f.check_inputs(tensors)
    return tensors


@contextlib.contextmanager
def _forward_level():
    depth = _forward_depth.get() + 1
    if depth > MAX_FORWARD_DEPTH:
        raise NestingError(
            f"forward-mode nesting depth {depth} exceeds the supported {MAX_FORWARD_DEPTH}"
        )
    token = _forward_depth.set(depth)
    try:
        yield depth
    finally:
        _forward_depth.reset(token)


def forward_depth() -> int:
    """Current forward-mode nesting level (0 outside any `jvp`)"""
    return _forward_depth.get()


def evaluate(f: Differentiable, *inputs: Any) -> Tensor:
    """Evaluate `f` on float64 inputs

    Arguments:
        f (Differentiable): Function to evaluate
        *inputs: Inputs matching the declared signature

    Returns:
        Tensor: Deterministic forward value

    Raises:
        ShapeError: Inputs do not match the declared signature or a primitive's operands
    """
    tensors = _prepare(f, inputs)
    return _unwrap(f)(*tensors)


def _raise_non_finite(exc: FloatingPointError):
    match = _NAN_PRIMITIVE.search(str(exc))
    primitive = match.group(1) if match else None
    raise NonFiniteError(
        f"non-finite value produced by primitive '{primitive or 'unknown'}'",
        primitive=primitive,
    ) from None


def grad(f: Differentiable, *at: Any) -> Union[Tensor, Tuple[Tensor, ...]]:
    """Reverse-mode gradient of a scalar-valued function

    Arguments:
        f (Differentiable): Scalar-valued function
        *at: Point at which to differentiate, one tensor per input

    Returns:
        Union[Tensor, Tuple[Tensor, ...]]: d f / d input, a tuple when `f` has several inputs

    Raises:
        ShapeError: Output is not a scalar
        NonFiniteError: The forward or backward pass produced NaN; names the primitive
    """
    tensors = _prepare(f, at)
    fn = _unwrap(f)
    out_shape = jax.eval_shape(fn, *tensors).shape
    if out_shape != ():
        raise ShapeError(f"grad: output of shape {out_shape} is not a scalar")

    argnums = tuple(range(len(tensors)))
    try:
        with jax.debug_nans(True):
            value, grads = jax.value_and_grad(fn, argnums=argnums)(*tensors)
    except FloatingPointError as exc:
        _raise_non_finite(exc)
    if not jnp.isfinite(value):
        raise NonFiniteError("grad: forward value is not finite")
    return grads[0] if len(grads) == 1 else grads


def value_and_grad(
    fn: Callable[..., Any], argnums: Union[int, Sequence[int]] = 0, has_aux: bool = False
) -> Callable[..., Any]:
    """Reverse-mode transformation for compiled loops

    Unlike `grad`, no NaN tracing is done; callers check the returned value.
    """
    return jax.value_and_grad(fn, argnums=argnums, has_aux=has_aux)


def jvp(f: Differentiable, at: Any, tangent: Any) -> Tuple[Tensor, Tensor]:
    """Forward-mode Jacobian-vector product

    Arguments:
        f (Differentiable): Single-input function
        at (Tensor): Linearization point
        tangent (Tensor): Direction, same shape as `at`

    Returns:
        Tuple[Tensor, Tensor]: `(f(at), J_f(at) @ tangent)` without forming `J_f`

    Raises:
        ShapeError: Tangent and point shapes differ
        NestingError: Called more than `MAX_FORWARD_DEPTH` levels deep
    """
    at, tangent = as_tensor(at), as_tensor(tangent)
    if at.shape != tangent.shape:
        raise ShapeError(f"jvp: tangent shape {tangent.shape} differs from point shape {at.shape}")
    if isinstance(f, DiffFunction):
        f.check_inputs((at,))
    with _forward_level():
        return jax.jvp(_unwrap(f), (at,), (tangent,))


def jvp_nested(
    f: Differentiable, at: Any, tangent: Any, target: Optional[Any] = None
) -> Tuple[Tensor, Tensor]:
    """Forward-over-forward product used by second-order Taylor expansions

    With `g(y) = J_f(y) @ (target - y)` and `target = at + tangent` unless given,
    returns `(g(at), J_g(at) @ tangent)`. Since `J_g(y) = H_f(y)(target - y) - J_f(y)`,
    the second output carries the Hessian contraction without forming the Hessian.

    Arguments:
        f (Differentiable): Twice differentiable single-input function
        at (Tensor): Expansion point
        tangent (Tensor): Direction, same shape as `at`
        target (Optional[Tensor]): Point `g` is anchored to; defaults to `at + tangent`

    Returns:
        Tuple[Tensor, Tensor]: `(g(at), J_g(at) @ tangent)`
    """
    at, tangent = as_tensor(at), as_tensor(tangent)
    target = at + tangent if target is None else as_tensor(target)

    def first_order(anchor: Tensor) -> Tensor:
        return jvp(f, anchor, target - anchor)[1]

    return jvp(first_order, at, tangent)
