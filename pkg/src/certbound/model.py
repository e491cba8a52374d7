"""Fully-connected ReLU networks: evaluation, margins and the model file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .tensor import DimensionError, as_tensor

FORMAT_TAG = "certbound-net-v1"


class ModelFormatError(ValueError):
    """A model file could not be decoded into a valid network."""


@dataclass(frozen=True)
class DenseLayer:
    weight: object  # ndarray (out, in) or ad.Var during training
    bias: object  # ndarray (out,) or ad.Var

    @property
    def n_in(self) -> int:
        return ad.value(self.weight).shape[1]

    @property
    def n_out(self) -> int:
        return ad.value(self.weight).shape[0]


@dataclass(frozen=True)
class Network:
    """Dense layers with an implicit ReLU between consecutive layers.

    The last layer has no activation; its output is the logit vector.
    Weights may be ``ad.Var`` objects, in which case every engine that
    consumes the network records onto their tape.
    """

    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 2:
            raise ValueError("a network needs at least one hidden layer (L >= 2)")
        for i, layer in enumerate(self.layers):
            w, b = ad.value(layer.weight), ad.value(layer.bias)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and self.layers[i - 1].n_out != w.shape[1]:
                raise DimensionError(
                    f"layer {i}: expects {w.shape[1]} inputs, previous layer has {self.layers[i - 1].n_out} outputs"
                )

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence | None = None) -> "Network":
        if biases is None:
            biases = [None] * len(weights)
        layers = []
        for w, b in zip(weights, biases):
            w = as_tensor(np.atleast_2d(np.asarray(w, dtype=np.float64)))
            b = as_tensor(np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64).reshape(-1))
            layers.append(DenseLayer(w, b))
        return cls(tuple(layers))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def weights(self) -> list:
        return [layer.weight for layer in self.layers]

    @property
    def biases(self) -> list:
        return [layer.bias for layer in self.layers]


def toy_network() -> Network:
    """The 2-4-1 max-margin classifier for the V-shaped toy distribution."""
    w1 = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    w2 = [[-1.0, -1.0, 1.0, -1.0]]
    return Network.from_arrays([w1, w2])


def random_network(widths: Sequence[int], rng: np.random.Generator, scale: float | None = None) -> Network:
    """Network with uniform(-s, s) weights and biases, s = 1/sqrt(fan_in) by default."""
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        s = 1.0 / math.sqrt(n_in) if scale is None else scale
        weights.append(rng.uniform(-s, s, size=(n_out, n_in)))
        biases.append(rng.uniform(-s, s, size=n_out))
    return Network.from_arrays(weights, biases)


# ---------------------------------------------------------------- evaluation

def forward(net: Network, z1):
    """Pre-activations ``x_i`` and layer inputs ``z_i`` for i = 1..L.

    Returns a list of ``(x_i, z_i)`` pairs. ``z1`` may carry leading batch
    dimensions; ``x_L`` is the logit vector.
    """
    zv = ad.value(z1)
    if zv.shape[-1] != net.n_in:
        raise DimensionError(f"input width {zv.shape[-1]} != network input width {net.n_in}")
    out = []
    z = z1
    for i, layer in enumerate(net.layers):
        x = _affine(layer, z)
        out.append((x, z))
        if i + 1 < net.depth:
            z = ad.relu(x)
    return out


def _affine(layer: DenseLayer, z):
    # z @ W^T keeps any leading batch dimensions.
    return ad.matmul(z, ad.swapaxes(layer.weight, 0, 1)) + layer.bias


def logits(net: Network, z1):
    return forward(net, z1)[-1][0]


def pre_activations(net: Network, z1) -> list:
    return [x for x, _ in forward(net, z1)]


@dataclass(frozen=True)
class MarginSpec:
    """Margin direction ``c_t = e_y - e_t`` for label ``y`` against target ``t``.

    Single-output (binary) networks use ``c = [1]`` for label 1 and ``[-1]``
    for label 0; the only target is the other class.
    """

    label: int
    target: int
    n_out: int

    @property
    def c(self) -> np.ndarray:
        return margin_vector(self.label, self.target, self.n_out)


def margin_vector(label: int, target: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        if label not in (0, 1) or target not in (0, 1):
            raise ValueError("binary networks take labels in {0, 1}")
        if label == target:
            return np.zeros(1)
        return np.array([1.0 if label == 1 else -1.0])
    if not (0 <= label < n_out and 0 <= target < n_out):
        raise ValueError(f"class index out of range for {n_out} outputs")
    c = np.zeros(n_out)
    c[label] += 1.0
    c[target] -= 1.0
    return c


def target_classes(label: int, n_out: int) -> list[int]:
    """All classes t != label (the other class for binary networks)."""
    if n_out == 1:
        return [1 - int(label)]
    return [t for t in range(n_out) if t != label]


def margin_specs(label: int, n_out: int) -> list[MarginSpec]:
    return [MarginSpec(int(label), t, n_out) for t in target_classes(label, n_out)]


def margin_tensor(labels, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched margin directions for every class.

    Returns ``(C, mask)`` with ``C`` of shape (B, T, n_out). For multi-class
    networks T = n_out and row ``y`` is the zero vector (masked out); for
    binary networks T = 1.
    """
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if n_out == 1:
        C = np.where(labels == 1, 1.0, -1.0)[:, None, None]
        return C, np.ones((labels.size, 1), dtype=bool)
    eye = np.eye(n_out)
    C = eye[labels][:, None, :] - eye[None, :, :]
    mask = np.arange(n_out)[None, :] != labels[:, None]
    return C, mask


def predict(net: Network, x) -> np.ndarray:
    out = ad.value(logits(net, np.asarray(x, dtype=np.float64)))
    if net.n_out == 1:
        return (out[..., 0] >= 0).astype(int)
    return np.argmax(out, axis=-1)


def margin(net: Network, x, spec: MarginSpec):
    """``c_t^T h_L(x)``."""
    return ad.matmul(logits(net, x), spec.c)


# ------------------------------------------------------------- serialization

def _encode(v: float) -> str:
    return float(v).hex()


def _decode(v, where: str) -> float:
    try:
        f = float.fromhex(v) if isinstance(v, str) and "0x" in v.lower() else float(v)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: cannot parse number {v!r}") from exc
    if not math.isfinite(f):
        raise ModelFormatError(f"{where}: non-finite value {v!r}")
    return f


def to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        w, b = ad.value(layer.weight), ad.value(layer.bias)
        layers.append({
            "in": int(w.shape[1]),
            "out": int(w.shape[0]),
            "weights": [_encode(v) for v in w.reshape(-1)],
            "bias": [_encode(v) for v in b],
        })
    return {"format": FORMAT_TAG, "layers": layers}


def from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"expected a document with format {FORMAT_TAG!r}")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or len(raw_layers) < 2:
        raise ModelFormatError("'layers' must be a list of at least two layers")
    weights, biases = [], []
    prev_out = None
    for i, raw in enumerate(raw_layers):
        where = f"layer {i}"
        try:
            n_in, n_out = int(raw["in"]), int(raw["out"])
            flat = raw["weights"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{where}: missing or invalid 'in'/'out'/'weights'") from exc
        if n_in <= 0 or n_out <= 0 or not isinstance(flat, list) or len(flat) != n_in * n_out:
            raise ModelFormatError(f"{where}: expected {n_in}x{n_out} weights")
        if prev_out is not None and prev_out != n_in:
            raise ModelFormatError(f"{where}: input width {n_in} does not chain with previous output {prev_out}")
        w = np.array([_decode(v, where) for v in flat]).reshape(n_out, n_in)
        raw_bias = raw.get("bias")
        if raw_bias is None:
            b = np.zeros(n_out)
        else:
            if not isinstance(raw_bias, list) or len(raw_bias) != n_out:
                raise ModelFormatError(f"{where}: expected {n_out} bias entries")
            b = np.array([_decode(v, where) for v in raw_bias])
        weights.append(w)
        biases.append(b)
        prev_out = n_out
    return Network.from_arrays(weights, biases)


def save(net: Network, path) -> None:
    Path(path).write_text(json.dumps(to_dict(net), indent=1) + "\n")


def load(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)
