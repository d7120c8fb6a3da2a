"""
Contextual vector fields

The field `f(x, xi)` is a 3-networks MLP: a state network and a context network
project `x` and `xi` into representations that are concatenated and fed to a main
network. `taylor_eval` wraps it in a Taylor expansion of order 0, 1 or 2 in the
context, computed with forward-mode products only.

Parameters are immutable pytrees; every function here is pure.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import IntEnum
from functools import partial
from typing import *

import jax
import jax.numpy as jnp
import numpy as np

from . import diffcore as dc
from .core import ConfigError, DtypeError, ManifestError, ShapeError, SizeMismatchError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_ACTIVATION = "swish"
BLOB_DTYPE = "f64le"


@partial(jax.tree_util.register_dataclass, data_fields=["weight", "bias"], meta_fields=[])
@dataclass(frozen=True)
class Layer:
    weight: Tensor
    """`[fan_in, fan_out]`"""
    bias: Tensor
    """`[fan_out]`"""


@partial(jax.tree_util.register_dataclass, data_fields=["layers"], meta_fields=["activation", "final_activation"])
@dataclass(frozen=True)
class MlpParams:
    """Dense network; `activation` follows every layer except the last, which uses `final_activation`"""

    layers: Tuple[Layer, ...]
    activation: str = DEFAULT_ACTIVATION
    final_activation: str = "identity"

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.layers[0].weight.shape[0],) + tuple(layer.weight.shape[1] for layer in self.layers)

    def check(self):
        for position, (before, after) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if before.weight.shape[1] != after.weight.shape[0]:
                raise ShapeError(f"layer {position} emits {before.weight.shape[1]} features, layer {position + 1} takes {after.weight.shape[0]}")
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeError(f"bias of shape {layer.bias.shape} does not match weight {layer.weight.shape}")


@dataclass(frozen=True)
class NetWidths:
    """Layer widths of the three networks

    Attributes:
        state (Tuple[int, ...]): Widths after each state-network layer; the last is the representation size
        context (Tuple[int, ...]): Widths after each context-network layer
        main (Tuple[int, ...]): Hidden widths of the main network; its output width is always `d`
        equal_halves (bool): Require the state and context representations to have the same size
    """

    state: Tuple[int, ...] = (64, 64)
    context: Tuple[int, ...] = (64, 64)
    main: Tuple[int, ...] = (64, 64)
    equal_halves: bool = True

    def __post_init__(self):
        for name in ("state", "context", "main"):
            values = tuple(int(value) for value in getattr(self, name))
            object.__setattr__(self, name, values)
            if any(value <= 0 for value in values):
                raise ConfigError(f"{name} widths must be positive, got {values}")
        if not self.state or not self.context:
            raise ConfigError("state and context networks need at least one layer")
        if self.equal_halves and self.state[-1] != self.context[-1]:
            raise ShapeError(f"state representation {self.state[-1]} and context representation {self.context[-1]} differ")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "NetWidths":
        unknown = set(values) - {"state", "context", "main", "equal_halves"}
        if unknown:
            raise ConfigError(f"Unknown width keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {"state": list(self.state), "context": list(self.context), "main": list(self.main), "equal_halves": self.equal_halves}

    def scaled(self, factor: float) -> "NetWidths":
        """Same layout with every hidden width multiplied by `factor`"""
        grow = lambda values: tuple(max(1, round(value * factor)) for value in values)
        return NetWidths(grow(self.state), grow(self.context), grow(self.main), self.equal_halves)


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["state_net", "context_net", "main_net"],
    meta_fields=["d", "d_xi"],
)
@dataclass(frozen=True)
class ThreeNetParams:
    """Weights of the 3-networks field

    `context_net` is None for the context-free variant (`d_xi == 0`), where the main
    network sees only the state representation.
    """

    state_net: MlpParams
    context_net: Optional[MlpParams]
    main_net: MlpParams
    d: int
    d_xi: int

    @property
    def hidden(self) -> int:
        return self.state_net.widths[-1]

    def nets(self) -> List[Tuple[str, MlpParams]]:
        named = [("state_net", self.state_net), ("context_net", self.context_net), ("main_net", self.main_net)]
        return [(name, net) for name, net in named if net is not None]

    def check(self):
        for _, net in self.nets():
            net.check()
        represented = self.state_net.widths[-1] + (self.context_net.widths[-1] if self.context_net is not None else 0)
        if self.main_net.widths[0] != represented:
            raise ShapeError(f"main_net takes {self.main_net.widths[0]} features, representations provide {represented}")
        if self.main_net.widths[-1] != self.d:
            raise ShapeError(f"main_net emits {self.main_net.widths[-1]} features, state size is {self.d}")

    def widths(self) -> NetWidths:
        context = self.context_net.widths[1:] if self.context_net is not None else self.state_net.widths[1:]
        return NetWidths(self.state_net.widths[1:], context, self.main_net.widths[1:-1], equal_halves=False)


class TaylorOrder(IntEnum):
    ZERO = 0
    FIRST = 1
    SECOND = 2

    @classmethod
    def get_type(cls, k: Union[int, "TaylorOrder"]) -> "TaylorOrder":
        try:
            return cls(int(k))
        except ValueError:
            raise ConfigError(f"Taylor order must be 0, 1 or 2, got {k}") from None


def _init_mlp(key: jax.Array, widths: Sequence[int], activation: str) -> MlpParams:
    if activation not in dc.UNARY_PRIMITIVES:
        raise ConfigError(f"Unknown activation '{activation}'")
    glorot = jax.nn.initializers.glorot_uniform()
    keys = jax.random.split(key, len(widths) - 1)
    layers = tuple(
        Layer(glorot(layer_key, (fan_in, fan_out), jnp.float64), jnp.zeros((fan_out,), dtype=jnp.float64))
        for layer_key, fan_in, fan_out in zip(keys, widths[:-1], widths[1:])
    )
    return MlpParams(layers, activation)


def init_three_net(d: int, d_xi: int, widths: Union[NetWidths, Mapping[str, Any]], seed: int, activation: str = DEFAULT_ACTIVATION) -> ThreeNetParams:
    """Glorot-uniform weights and zero biases, reproducible from `seed`

    Arguments:
        d (int): State size
        d_xi (int): Context size; 0 builds the context-free variant
        widths (Union[NetWidths, Mapping]): Layer widths
        seed (int): Initialization seed
        activation (str): Hidden activation, a name from `diffcore.UNARY_PRIMITIVES`

    Returns:
        ThreeNetParams: Fresh parameters

    Raises:
        ShapeError: Representation widths are inconsistent
        ConfigError: Non-positive sizes or unknown activation
    """
    if not isinstance(widths, NetWidths):
        widths = NetWidths.from_dict(widths)
    if d <= 0 or d_xi < 0:
        raise ConfigError(f"Invalid sizes d={d}, d_xi={d_xi}")
    state_key, context_key, main_key = jax.random.split(jax.random.PRNGKey(seed), 3)
    state_net = _init_mlp(state_key, (d, *widths.state), activation)
    context_net = _init_mlp(context_key, (d_xi, *widths.context), activation) if d_xi > 0 else None
    represented = widths.state[-1] + (widths.context[-1] if d_xi > 0 else 0)
    main_net = _init_mlp(main_key, (represented, *widths.main, d), activation)
    params = ThreeNetParams(state_net, context_net, main_net, d, d_xi)
    params.check()
    return params


def mlp_eval(params: MlpParams, x: Tensor) -> Tensor:
    activation = dc.UNARY_PRIMITIVES[params.activation]
    final = dc.UNARY_PRIMITIVES[params.final_activation]
    last = len(params.layers) - 1
    for position, layer in enumerate(params.layers):
        x = dc.add(dc.matmul(x, layer.weight), layer.bias)
        x = final(x) if position == last else activation(x)
    return x


def vf_eval(params: ThreeNetParams, x: Tensor, xi: Optional[Tensor]) -> Tensor:
    """f(x, xi) = main_net(concat(state_net(x), context_net(xi)))

    Raises:
        ShapeError: `x` or `xi` do not match the parameter sizes
    """
    if jnp.shape(x) != (params.d,):
        raise ShapeError(f"vf_eval: state of shape {jnp.shape(x)}, expected ({params.d},)")
    parts = [mlp_eval(params.state_net, x)]
    if params.context_net is not None:
        if jnp.shape(xi) != (params.d_xi,):
            raise ShapeError(f"vf_eval: context of shape {jnp.shape(xi)}, expected ({params.d_xi},)")
        parts.append(mlp_eval(params.context_net, xi))
    return mlp_eval(params.main_net, dc.concatenate(parts))


def taylor_eval(params: ThreeNetParams, x: Tensor, xi_e: Tensor, xi_j: Tensor, k: Union[int, TaylorOrder]) -> Tensor:
    """Taylor expansion of the field in its context, around `xi_j` and evaluated at `xi_e`

    k=0 is `f(x, xi_e)`. k=1 adds one JVP to `f(x, xi_j)`. k=2 uses
    `f(xi_j) + 1.5 g(xi_j) + 0.5 J_g(xi_j)(xi_e - xi_j)` with
    `g(u) = J_f(u)(xi_e - u)`, which needs two nested JVPs.
    """
    k = TaylorOrder.get_type(k)
    if k == TaylorOrder.ZERO:
        return vf_eval(params, x, xi_e)

    def in_context(xi: Tensor) -> Tensor:
        return vf_eval(params, x, xi)

    step = xi_e - xi_j
    if k == TaylorOrder.FIRST:
        value, directional = dc.jvp(in_context, xi_j, step)
        return value + directional

    correction, curvature = dc.jvp_nested(in_context, xi_j, step, target=xi_e)
    return in_context(xi_j) + 1.5 * correction + 0.5 * curvature


def make_field(k: Union[int, TaylorOrder]) -> Callable[[Tensor, Any], Tensor]:
    """Integrator-ready field taking `args = (params, xi_e, xi_j)`"""
    k = TaylorOrder.get_type(k)

    def contextual_field(x: Tensor, args: Tuple[ThreeNetParams, Tensor, Tensor]) -> Tensor:
        params, xi_e, xi_j = args
        return taylor_eval(params, x, xi_e, xi_j, k)

    return contextual_field


def plain_field(x: Tensor, params: ThreeNetParams) -> Tensor:
    """Field for context-free parameters (`d_xi == 0`)"""
    return vf_eval(params, x, None)


def count_params(params: Any) -> int:
    """Number of scalar weights in any parameter pytree"""
    return int(sum(np.prod(np.shape(leaf), dtype=np.int64) for leaf in jax.tree_util.tree_leaves(params)))


def count_weights(d: int, d_xi: int, widths: NetWidths) -> int:
    """`count_params` of `init_three_net(d, d_xi, widths, ...)` without building it"""

    def dense(chain: Sequence[int]) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(chain[:-1], chain[1:]))

    represented = widths.state[-1] + (widths.context[-1] if d_xi > 0 else 0)
    total = dense((d, *widths.state)) + dense((represented, *widths.main, d))
    return total + (dense((d_xi, *widths.context)) if d_xi > 0 else 0)


### Checkpoints ###
def flatten_params(params: ThreeNetParams) -> np.ndarray:
    """Weights in checkpoint order

    Networks in the order state_net, context_net (if any), main_net; within each,
    layers in order; within each layer the row-major `[fan_in, fan_out]` weight
    followed by the bias.
    """
    chunks = []
    for _, net in params.nets():
        for layer in net.layers:
            chunks.append(np.asarray(layer.weight, dtype=np.float64).ravel())
            chunks.append(np.asarray(layer.bias, dtype=np.float64).ravel())
    return np.concatenate(chunks)


def _manifest(params: ThreeNetParams, seed: Optional[int]) -> Dict[str, Any]:
    return {
        "d": params.d,
        "d_xi": params.d_xi,
        "dtype": BLOB_DTYPE,
        "nets": {name: {"widths": list(net.widths), "activation": net.activation, "final_activation": net.final_activation} for name, net in params.nets()},
        "seed": seed,
        "size": count_params(params),
    }


def params_digest(params: ThreeNetParams) -> str:
    """SHA-256 over the layout and the little-endian weight bytes"""
    layout = json.dumps(_manifest(params, None), sort_keys=True).encode()
    return hashlib.sha256(layout + flatten_params(params).astype("<f8").tobytes()).hexdigest()


def unflatten_params(flat: np.ndarray, manifest: Mapping[str, Any]) -> ThreeNetParams:
    nets: Dict[str, Optional[MlpParams]] = {"context_net": None}
    offset = 0
    for name in ("state_net", "context_net", "main_net"):
        if name not in manifest["nets"]:
            continue
        entry = manifest["nets"][name]
        widths = entry["widths"]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weight = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = flat[offset : offset + fan_out]
            offset += fan_out
            layers.append(Layer(jnp.asarray(weight), jnp.asarray(bias)))
        nets[name] = MlpParams(tuple(layers), entry["activation"], entry["final_activation"])
    if offset != flat.size:
        raise SizeMismatchError(f"weight blob holds {flat.size} values, layout needs {offset}")
    params = ThreeNetParams(nets["state_net"], nets["context_net"], nets["main_net"], manifest["d"], manifest["d_xi"])
    params.check()
    return params


def save_params(params: ThreeNetParams, path: Union[str, os.PathLike], seed: Optional[int] = None):
    """Write `manifest.json` and `weights.bin` into directory `path`"""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(_manifest(params, seed), fh, sort_keys=True, indent=2)
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        fh.write(flatten_params(params).astype("<f8").tobytes())
    logger.info("Saved %d weights to %s", count_params(params), path)


def load_params(path: Union[str, os.PathLike]) -> ThreeNetParams:
    """Read a checkpoint written by `save_params`

    Raises:
        ManifestError: Missing or malformed manifest
        DtypeError: Unsupported blob dtype
        SizeMismatchError: Blob size disagrees with the manifest
    """
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        size = int(manifest["size"])
        manifest["nets"], manifest["d"], manifest["d_xi"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"Unreadable checkpoint manifest in {path}: {exc}") from None
    if manifest.get("dtype") != BLOB_DTYPE:
        raise DtypeError(f"Unknown weight dtype {manifest.get('dtype')!r}")
    with open(os.path.join(path, "weights.bin"), "rb") as fh:
        raw = fh.read()
    if len(raw) != size * 8:
        raise SizeMismatchError(f"weights.bin is {len(raw)} bytes, manifest declares {size * 8}")
    return unflatten_params(np.frombuffer(raw, dtype="<f8").astype(np.float64), manifest)
