"""Networks whose weight matrices are stored as ``W = U @ V + C``.

Each conv or fully-connected layer is viewed as ``x_out = W x_in`` over an
m x n matrix with m >= n.  Raw layers with more inputs than outputs are
stored transposed so the square factor ``U`` is always the larger side.

A layer can also be held in *dense* form, where ``U`` is the implicit
identity and ``C`` the implicit zero; only ``V`` is then stored, trained and
counted.  The baselines that prune plain weights use this form.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | fc | relu | maxpool | flatten
    n_in: int = 0
    n_out: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0

    @property
    def weighted(self):
        return self.kind in ("conv", "fc")

    @property
    def raw_shape(self):
        """(out, in) shape of the layer as a matrix product."""
        if self.kind == "conv":
            return self.n_out, self.n_in * self.kernel * self.kernel
        return self.n_out, self.n_in


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple
    n_classes: int
    layers: tuple

    def weighted_layers(self):
        return [l for l in self.layers if l.weighted]

    def n_weights(self):
        return sum(int(np.prod(l.raw_shape)) for l in self.weighted_layers())

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [vars(l).copy() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            n_classes=int(d["n_classes"]),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
        )


def lenet():
    """Caffe-style LeNet for 28x28 inputs: 430,500 weights."""
    return ArchitectureSpec(
        "lenet", (1, 28, 28), 10,
        (
            LayerSpec("conv", 1, 20, kernel=5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("conv", 20, 50, kernel=5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("flatten"),
            LayerSpec("fc", 800, 500), LayerSpec("relu"),
            LayerSpec("fc", 500, 10),
        ),
    )


def convnet_small(n_classes=10):
    """A narrow LeNet variant for quick 28x28 experiments."""
    return ArchitectureSpec(
        "convnet-small", (1, 28, 28), n_classes,
        (
            LayerSpec("conv", 1, 8, kernel=5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("conv", 8, 16, kernel=5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("flatten"),
            LayerSpec("fc", 256, 64), LayerSpec("relu"),
            LayerSpec("fc", 64, n_classes),
        ),
    )


def mlp_small(n_classes=2, side=8, hidden=32):
    return ArchitectureSpec(
        "mlp-small", (1, side, side), n_classes,
        (
            LayerSpec("flatten"),
            LayerSpec("fc", side * side, hidden), LayerSpec("relu"),
            LayerSpec("fc", hidden, n_classes),
        ),
    )


ARCHITECTURES = {"lenet": lenet, "convnet-small": convnet_small, "mlp-small": mlp_small}


def get_arch(name, **kwargs):
    try:
        return ARCHITECTURES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


@dataclass
class ParamTriple:
    """One layer's weights.  ``U`` and ``C`` are ``None`` in dense form."""

    V: Tensor
    U: Tensor | None = None
    C: Tensor | None = None
    bias: Tensor | None = None
    transposed: bool = False

    @property
    def factorized(self):
        return self.U is not None

    @property
    def shape(self):
        return self.V.shape

    def matrices(self):
        """(name, tensor) pairs in the fixed U < V < C order, skipping implicit ones."""
        out = []
        if self.U is not None:
            out.append(("U", self.U))
        out.append(("V", self.V))
        if self.C is not None:
            out.append(("C", self.C))
        return out


@dataclass
class ModelParams:
    arch: ArchitectureSpec
    layers: list = field(default_factory=list)

    def matrices(self):
        """(layer index, name, tensor) for every compressible matrix, in traversal order."""
        return [(i, name, m) for i, t in enumerate(self.layers) for name, m in t.matrices()]

    def parameters(self):
        """Every trainable tensor, biases included."""
        out = [m for _, _, m in self.matrices()]
        out += [t.bias for t in self.layers if t.bias is not None]
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def total_nnz(self):
        return sum(count_l0(m) for _, _, m in self.matrices())

    def n_entries(self):
        return sum(m.size for _, _, m in self.matrices())

    def copy(self):
        return copy.deepcopy(self)

    def zeros_like(self):
        out = self.copy()
        for _, _, m in out.matrices():
            m.data[...] = 0
        return out

    def flat(self):
        """Concatenation of all compressible matrices in traversal order."""
        return np.concatenate([m.data.ravel() for _, _, m in self.matrices()])


def effective_weight(t: ParamTriple) -> Tensor:
    """``U @ V + C`` as a graph node (just ``V`` in dense form)."""
    if t.U is None:
        w = t.V
    else:
        w = T.matmul(t.U, t.V)
    if t.C is not None:
        w = w + t.C
    return w


def count_l0(m) -> int:
    """Number of nonzero entries."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    return int(np.count_nonzero(data))


def count_distinct_nonzero(m) -> int:
    """Number of distinct nonzero values, compared exactly."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    nz = data[data != 0]
    return int(np.unique(nz).size)


def _oriented(shape):
    out, inp = shape
    return (inp, out, True) if out < inp else (out, inp, False)


def init_factorized(spec: ArchitectureSpec, seed=0, factorized=True, dtype=None) -> ModelParams:
    """Fan-in scaled uniform weights ``W0``; factorized layers start as ``U=I, V=W0, C=0``."""
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    layers = []
    for l in spec.weighted_layers():
        out, inp = l.raw_shape
        bound = 1.0 / np.sqrt(inp)
        w0 = rng.uniform(-bound, bound, size=(out, inp)).astype(dtype)
        m, n, transposed = _oriented((out, inp))
        v = w0.T.copy() if transposed else w0
        triple = ParamTriple(
            V=Tensor(v, requires_grad=True),
            bias=Tensor(np.zeros(out, dtype=dtype), requires_grad=True),
            transposed=transposed,
        )
        if factorized:
            triple.U = Tensor(np.eye(m, dtype=dtype), requires_grad=True)
            triple.C = Tensor(np.zeros((m, n), dtype=dtype), requires_grad=True)
        layers.append(triple)
    return ModelParams(spec, layers)


def to_factorized(model: ModelParams) -> ModelParams:
    """Lift dense layers to ``U=I, V=W, C=0`` form (a no-op for factorized ones)."""
    out = model.copy()
    for t in out.layers:
        if t.U is None:
            m, n = t.V.shape
            t.U = Tensor(np.eye(m, dtype=t.V.dtype), requires_grad=True)
            t.C = Tensor(np.zeros((m, n), dtype=t.V.dtype), requires_grad=True)
    return out


def to_dense(model: ModelParams) -> ModelParams:
    """Collapse every layer to its effective weight held in dense form."""
    out = model.copy()
    for t in out.layers:
        if t.U is not None:
            t.V = Tensor(effective_weight(t).data.copy(), requires_grad=True)
            t.U = None
            t.C = None
    return out


def effective_array(t: ParamTriple) -> np.ndarray:
    """``U @ V + C`` as a plain array, outside any graph."""
    w = t.V.data if t.U is None else t.U.data @ t.V.data
    return w + t.C.data if t.C is not None else w


def raw_weight(t: ParamTriple, track=True) -> Tensor:
    """The layer weight in (out, in) orientation."""
    w = effective_weight(t) if track else Tensor(effective_array(t))
    return w.T if t.transposed else w


def layer_weights(model: ModelParams, track=True):
    """Raw-oriented weights and biases for each weighted layer.

    With ``track=False`` they are constants, which is what attacks need: the
    product ``U @ V`` is formed once and gradients flow only to the input.
    """
    ws = []
    for t in model.layers:
        if track:
            ws.append((raw_weight(t), t.bias))
        else:
            b = None if t.bias is None else Tensor(t.bias.data)
            ws.append((raw_weight(t, track=False), b))
    return ws


def forward(model: ModelParams, batch, weights=None) -> Tensor:
    """Logits of shape (N, n_classes)."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.layers[0].V.dtype))
    spec = model.arch
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    if weights is None:
        weights = layer_weights(model)
    wi = 0
    for l in spec.layers:
        if l.kind == "conv":
            w, b = weights[wi]
            wi += 1
            x = T.conv2d(x, w.reshape(l.n_out, l.n_in, l.kernel, l.kernel), l.stride, l.pad)
            if b is not None:
                x = x + b.reshape(1, l.n_out, 1, 1)
        elif l.kind == "fc":
            w, b = weights[wi]
            wi += 1
            x = T.matmul(x, w.T)
            if b is not None:
                x = x + b
        elif l.kind == "relu":
            x = T.relu(x)
        elif l.kind == "maxpool":
            x = T.maxpool2d(x, l.kernel, l.stride)
        elif l.kind == "flatten":
            x = T.flatten(x)
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
    return x


def predict(model: ModelParams, x, batch_size=500):
    weights = layer_weights(model, track=False)
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward(model, x[i:i + batch_size], weights).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
