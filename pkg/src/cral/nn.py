"""Neural building blocks on top of the tape.

Provides named parameters, linear layers, relu MLPs with inverted
dropout, Glorot-uniform initialization, the Adam optimizer, and a
versioned binary checkpoint container.

Dropout contract: in train mode each hidden activation is multiplied by
a mask whose entries are 0 (dropped) or 1/(1-rate) (kept), so eval mode
needs no rescaling. Callers may pass masks explicitly to replay the
exact same forward stochasticity across several passes; virtual
adversarial perturbations depend on this.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, SpecError, TrainingError
from .tensor import Tape, Tensor, add_bias, matmul, mul, relu, transpose

MODES = ("train", "eval")


class Parameter:
    """A named trainable array. Identity (not name) keys tape bindings."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    dropout_rate: float = 0.4

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        for d in dims:
            if int(d) <= 0:
                raise SpecError(f"mlp dims must be positive, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")


class LinearLayer:
    """Affine map x -> x W^T + b with weight stored as (out, in)."""

    __slots__ = ("weight", "bias")

    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    def apply(self, tape: Tape, x: Tensor) -> Tensor:
        w = tape.bind(self.weight, self.weight.value)
        b = tape.bind(self.bias, self.bias.value)
        return add_bias(matmul(x, transpose(w)), b)


class Mlp:
    """Stack of linear layers; relu + dropout after every hidden layer."""

    def __init__(self, spec: MlpSpec, layers: Sequence[LinearLayer]):
        self.spec = spec
        self.layers = list(layers)

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(spec: MlpSpec, rng: np.random.Generator, name: str = "mlp") -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic given the rng state."""
    dims = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = int(dims[k]), int(dims[k + 1])
        weight = Parameter(f"{name}/layer{k}/weight", glorot_uniform(rng, fan_out, fan_in))
        bias = Parameter(f"{name}/layer{k}/bias", np.zeros(fan_out))
        layers.append(LinearLayer(weight, bias))
    return Mlp(spec, layers)


def draw_dropout_masks(mlp: Mlp, n: int, rng: np.random.Generator) -> list:
    """One inverted-dropout mask per hidden layer for a batch of n rows."""
    rate = mlp.spec.dropout_rate
    masks = []
    for width in mlp.spec.hidden_dims:
        if rate == 0.0:
            masks.append(np.ones((n, int(width))))
        else:
            keep = rng.random((n, int(width))) >= rate
            masks.append(keep.astype(np.float64) / (1.0 - rate))
    return masks


def mlp_forward(
    tape: Tape,
    mlp: Mlp,
    x: Tensor,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[list] = None,
) -> tuple:
    """Run the MLP; returns (output, masks_used).

    masks_used is None in eval mode (or rate 0) and otherwise the list of
    per-hidden-layer mask arrays, suitable for passing back in to repeat
    the identical stochastic forward pass.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if x.data.ndim != 2 or x.shape[1] != mlp.spec.input_dim:
        raise DimensionError(
            f"mlp expects input width {mlp.spec.input_dim}, got shape {x.shape}"
        )
    rate = mlp.spec.dropout_rate
    dropping = mode == "train" and rate > 0.0
    if dropping and masks is None:
        if rng is None:
            raise ContractError("train-mode dropout needs an rng or explicit masks")
        masks = draw_dropout_masks(mlp, x.shape[0], rng)
    if dropping and len(masks) != len(mlp.spec.hidden_dims):
        raise ContractError(
            f"expected {len(mlp.spec.hidden_dims)} dropout masks, got {len(masks)}"
        )

    h = x
    for k, layer in enumerate(mlp.layers[:-1]):
        h = relu(layer.apply(tape, h))
        if dropping:
            mask = np.asarray(masks[k], dtype=np.float64)
            if mask.shape != h.shape:
                raise DimensionError(
                    f"dropout mask {k} has shape {mask.shape}, activations {h.shape}"
                )
            h = mul(h, Tensor(mask))
    out = mlp.layers[-1].apply(tape, h)
    return out, (masks if dropping else None)


class Adam:
    """Adam with bias correction over a fixed parameter group."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads) -> None:
        """Apply one update from a Gradients object keyed by Parameter identity."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.wrt_key(p, p.value)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {p.name}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint container.
#
# Layout (all integers little-endian):
#   magic   8 bytes  b"CRALCKPT"
#   version uint32   currently 1
#   mlen    uint32   length of the UTF-8 JSON metadata blob
#   meta    mlen bytes
#   count   uint32   number of records
#   record: nlen uint32, name (UTF-8, nlen bytes), ndim uint32,
#           dims uint32[ndim], data float64[prod(dims)] row-major
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CRALCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: Optional[dict] = None) -> None:
    """Write a name -> float64 array mapping with a JSON metadata header."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            # np.ascontiguousarray would promote 0-d arrays to 1-d.
            arr = np.asarray(arrays[name], dtype=np.float64, order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Read back (meta, arrays). Rejects bad magic or unknown versions."""

    def take(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise ContractError(f"checkpoint truncated while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", take(fh, 4, "meta length"))
        meta = json.loads(take(fh, mlen, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", take(fh, 4, "record count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(fh, 4, "name length"))
            name = take(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", take(fh, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}I", take(fh, 4 * ndim, "dims")) if ndim else ()
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(take(fh, 8 * size, f"data for {name}"), dtype="<f8")
            arrays[name] = data.reshape(dims).astype(np.float64)
        return meta, arrays
