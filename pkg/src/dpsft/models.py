"""Small differentiable classifiers with exact per-sample gradients.

Supported architectures: logistic regression, ReLU MLPs (1-3 hidden layers,
optional feature-scale layer), and a conv net whose single convolution is the
first layer. Backpropagation is hand-written and vectorized over the batch, so
per-sample gradients come out of one pass as an (n, d) matrix aligned with the
parameter layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .params import KIND_BIAS, KIND_SCALE, KIND_WEIGHT, Layout, ParamVector, Segment


@dataclass(frozen=True)
class Batch:
    """A minibatch; empty batches are legal under Poisson sampling."""

    x: np.ndarray
    y: np.ndarray
    sample_ids: np.ndarray

    @classmethod
    def from_arrays(cls, x, y, sample_ids=None) -> "Batch":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if sample_ids is None:
            sample_ids = np.arange(len(y))
        return cls(x, y, np.asarray(sample_ids, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _relu(z):
    return np.maximum(z, 0.0)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class _Dense:
    """Fully connected layer: z = x @ W.T + b."""

    def __init__(self, name, in_dim, out_dim, activation):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation  # "relu" | "none"
        self.w_name = f"{name}.weight"
        self.b_name = f"{name}.bias"

    def segments(self):
        return [
            Segment(self.w_name, KIND_WEIGHT, (self.out_dim, self.in_dim)),
            Segment(self.b_name, KIND_BIAS, (self.out_dim,)),
        ]

    def out_features(self):
        return self.out_dim

    def forward(self, params, x):
        w = params.get(self.w_name)
        b = params.get(self.b_name)
        z = x @ w.T + b
        a = _relu(z) if self.activation == "relu" else z
        return a, (x, z)

    def backward(self, params, delta, cache, grads, layout):
        x, z = cache
        if self.activation == "relu":
            delta = delta * (z > 0.0)
        gw = np.einsum("no,ni->noi", delta, x)
        grads[:, layout.slice_of(self.w_name)] = gw.reshape(len(delta), -1)
        grads[:, layout.slice_of(self.b_name)] = delta
        w = params.get(self.w_name)
        return delta @ w


class _Scale:
    """Per-feature learnable scaling, y = s * x; the norm-scale parameter kind."""

    def __init__(self, name, dim):
        self.name = name
        self.dim = dim
        self.s_name = f"{name}.scale"

    def segments(self):
        return [Segment(self.s_name, KIND_SCALE, (self.dim,))]

    def out_features(self):
        return self.dim

    def forward(self, params, x):
        s = params.get(self.s_name)
        return x * s, (x,)

    def backward(self, params, delta, cache, grads, layout):
        (x,) = cache
        grads[:, layout.slice_of(self.s_name)] = delta * x
        return delta * params.get(self.s_name)


class _Conv:
    """Valid 2-D convolution with stride 1 plus ReLU, then flatten.

    Implemented via im2col; restricted to the first position in the stack so
    no gradient with respect to its input is ever needed.
    """

    def __init__(self, name, in_shape, out_channels, kernel):
        self.name = name
        self.c_in, self.h, self.w = in_shape
        self.c_out = out_channels
        self.k = kernel
        self.h_out = self.h - kernel + 1
        self.w_out = self.w - kernel + 1
        if self.h_out <= 0 or self.w_out <= 0:
            raise ConfigError("kernel larger than input image")
        self.w_name = f"{name}.weight"
        self.b_name = f"{name}.bias"

    def segments(self):
        return [
            Segment(self.w_name, KIND_WEIGHT, (self.c_out, self.c_in, self.k, self.k)),
            Segment(self.b_name, KIND_BIAS, (self.c_out,)),
        ]

    def out_features(self):
        return self.c_out * self.h_out * self.w_out

    def _patches(self, x):
        n = x.shape[0]
        imgs = x.reshape(n, self.c_in, self.h, self.w)
        cols = np.empty((n, self.h_out * self.w_out, self.c_in * self.k * self.k))
        idx = 0
        for i in range(self.h_out):
            for j in range(self.w_out):
                cols[:, idx, :] = imgs[:, :, i : i + self.k, j : j + self.k].reshape(n, -1)
                idx += 1
        return cols

    def forward(self, params, x):
        k = params.get(self.w_name).reshape(self.c_out, -1)
        b = params.get(self.b_name)
        cols = self._patches(x)
        z = cols @ k.T + b  # (n, positions, c_out)
        a = _relu(z)
        out = a.transpose(0, 2, 1).reshape(x.shape[0], -1)
        return out, (cols, z)

    def backward(self, params, delta, cache, grads, layout):
        cols, z = cache
        n = delta.shape[0]
        d = delta.reshape(n, self.c_out, -1).transpose(0, 2, 1)  # (n, positions, c_out)
        d = d * (z > 0.0)
        gk = np.einsum("npo,npk->nok", d, cols)
        grads[:, layout.slice_of(self.w_name)] = gk.reshape(n, -1)
        grads[:, layout.slice_of(self.b_name)] = d.sum(axis=1)
        return None  # first layer only


@dataclass
class Model:
    """Architecture plus parameter layout; all math is pure in the params."""

    spec: dict
    layers: list = field(repr=False)
    layout: Layout = field(repr=False)
    input_dim: int = 0
    n_classes: int = 0

    @property
    def head_layer(self):
        return self.layers[-1]

    @property
    def head_segments(self) -> tuple[str, ...]:
        return (self.head_layer.w_name, self.head_layer.b_name)

    @property
    def always_trainable_segments(self) -> tuple[str, ...]:
        """Bias, norm-scale, and classifier head segments."""
        names = []
        head = set(self.head_segments)
        for seg in self.layout:
            if seg.name in head or seg.kind in (KIND_BIAS, KIND_SCALE):
                names.append(seg.name)
        return tuple(names)

    @property
    def maskable_segments(self) -> tuple[str, ...]:
        """Weight matrices eligible for mask selection (head excluded)."""
        head = set(self.head_segments)
        return tuple(
            seg.name for seg in self.layout if seg.kind == KIND_WEIGHT and seg.name not in head
        )

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        params = ParamVector.zeros(self.layout)
        for seg in self.layout:
            if seg.kind == KIND_WEIGHT:
                fan_in = seg.matrix_shape[1]
                params.set(seg.name, rng.normal(0.0, np.sqrt(2.0 / fan_in), seg.shape))
            elif seg.kind == KIND_SCALE:
                params.set(seg.name, np.ones(seg.shape))
        return params

    def reinit_head(self, params: ParamVector, rng: np.random.Generator) -> ParamVector:
        """Fresh classifier head for transfer tasks (output classes change)."""
        out = params.copy()
        w_name, b_name = self.head_segments
        seg = self.layout.segment(w_name)
        fan_in = seg.matrix_shape[1]
        out.set(w_name, rng.normal(0.0, 1.0 / np.sqrt(fan_in), seg.shape))
        out.set(b_name, np.zeros(self.layout.segment(b_name).shape))
        return out

    def _check_batch(self, params, x):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigError(
                f"batch features have shape {x.shape}, model expects (*, {self.input_dim})"
            )
        params.assert_finite("model parameters")

    def logits(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_batch(params, x)
        a = x
        for layer in self.layers:
            a, _ = layer.forward(params, a)
        return a

    def forward_loss(self, params: ParamVector, batch: Batch) -> tuple[float, np.ndarray]:
        """Mean softmax cross-entropy and the per-sample losses."""
        if batch.n == 0:
            return 0.0, np.zeros(0)
        logits = self.logits(params, batch.x)
        if np.any(batch.y < 0) or np.any(batch.y >= self.n_classes):
            raise ConfigError("labels outside class range")
        log_p = _log_softmax(logits)
        per_sample = -log_p[np.arange(batch.n), batch.y]
        return float(per_sample.mean()), per_sample

    def per_sample_grad_matrix(self, params: ParamVector, batch: Batch) -> np.ndarray:
        """(n, d) matrix of per-sample loss gradients, rows aligned with layout."""
        n = batch.n
        grads = np.zeros((n, self.layout.dim))
        if n == 0:
            return grads
        x = np.asarray(batch.x, dtype=np.float64)
        self._check_batch(params, x)
        a = x
        caches = []
        for layer in self.layers:
            a, cache = layer.forward(params, a)
            caches.append(cache)
        delta = _softmax(a)
        delta[np.arange(n), batch.y] -= 1.0
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            delta = layer.backward(params, delta, cache, grads, self.layout)
        return grads

    def per_sample_grad(self, params: ParamVector, batch: Batch) -> list[ParamVector]:
        mat = self.per_sample_grad_matrix(params, batch)
        return [ParamVector(self.layout, row.copy()) for row in mat]

    def evaluate(self, params: ParamVector, dataset) -> float:
        """Fraction of argmax-correct predictions; ties go to the lowest class."""
        x, y = dataset.x, dataset.y
        if len(y) == 0:
            raise UsageError("cannot evaluate on an empty dataset")
        pred = np.argmax(self.logits(params, x), axis=1)
        return float(np.mean(pred == y))


def build_model(spec: dict) -> Model:
    """Construct a model from an architecture description.

    Specs::

        {"type": "logistic", "input_dim": 20, "n_classes": 2}
        {"type": "mlp", "input_dim": 64, "hidden": [64], "n_classes": 4,
         "scale_layer": true}
        {"type": "convnet", "image": [1, 8, 8], "channels": 4, "kernel": 3,
         "hidden": [16], "n_classes": 10}
    """
    kind = spec.get("type")
    layers: list = []
    if kind == "logistic":
        input_dim = int(spec["input_dim"])
        layers.append(_Dense("head", input_dim, int(spec["n_classes"]), "none"))
    elif kind == "mlp":
        input_dim = int(spec["input_dim"])
        hidden = [int(h) for h in spec.get("hidden", [32])]
        if not 1 <= len(hidden) <= 3:
            raise ConfigError("mlp supports 1-3 hidden layers")
        feat = input_dim
        for i, h in enumerate(hidden, start=1):
            layers.append(_Dense(f"layer{i}", feat, h, "relu"))
            feat = h
        if spec.get("scale_layer", True):
            layers.append(_Scale("norm1", feat))
        layers.append(_Dense("head", feat, int(spec["n_classes"]), "none"))
    elif kind == "convnet":
        c, h, w = (int(v) for v in spec["image"])
        input_dim = c * h * w
        conv = _Conv("conv1", (c, h, w), int(spec.get("channels", 4)), int(spec.get("kernel", 3)))
        layers.append(conv)
        feat = conv.out_features()
        for i, hdim in enumerate(spec.get("hidden", []), start=1):
            layers.append(_Dense(f"layer{i}", feat, int(hdim), "relu"))
            feat = int(hdim)
        if spec.get("scale_layer", False):
            layers.append(_Scale("norm1", feat))
        layers.append(_Dense("head", feat, int(spec["n_classes"]), "none"))
    else:
        raise ConfigError(f"unknown model type {kind!r}")

    segments = []
    for layer in layers:
        segments.extend(layer.segments())
    model = Model(
        spec=dict(spec),
        layers=layers,
        layout=Layout(segments),
        input_dim=input_dim,
        n_classes=int(spec["n_classes"]),
    )
    return model
