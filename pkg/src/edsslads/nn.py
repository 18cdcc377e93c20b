"""Small numpy neural-network engine.

Supports the fixed layer set needed for spectrum detection and
classification: dense, 1D convolution, 1D max-pooling, ReLU, flatten and
softmax. Convolution and pooling use "same" padding, so every layer maps an
input of length ``n`` to ``ceil(n / stride)``.

Batched tensors are laid out as ``(batch, features)`` for vectors and
``(batch, channels, length)`` for 1D signals.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv1d", "maxpool1d", "relu", "flatten", "softmax")
CE_EPS = 1e-12
CHECKPOINT_MAGIC = b"EDSNNCK1"


class ConfigurationError(ValueError):
    """Raised for inconsistent layer shapes or bad network inputs."""


class TrainingError(RuntimeError):
    """Raised when optimisation diverges or fails to converge."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace or [])


def same_padding_length(n, stride):
    """Output length of a same-padded conv/pool layer."""
    return -(-n // stride)


def _pad_amounts(n, kernel_size, stride):
    out = same_padding_length(n, stride)
    total = max((out - 1) * stride + kernel_size - n, 0)
    return total // 2, total - total // 2, out


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 1
    stride: int = 1
    in_features: int = 0
    out_features: int = 0
    padding_mode: str = "same"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1 or self.stride < 1:
            raise ConfigurationError("kernel_size and stride must be >= 1")
        if self.padding_mode != "same":
            raise ConfigurationError("only same padding is supported")


def dense(out_features):
    return LayerSpec("dense", out_features=out_features)


def conv1d(out_features, kernel_size, stride):
    return LayerSpec("conv1d", kernel_size=kernel_size, stride=stride, out_features=out_features)


def maxpool1d(kernel_size, stride):
    return LayerSpec("maxpool1d", kernel_size=kernel_size, stride=stride)


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def softmax_layer():
    return LayerSpec("softmax")


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(probs, one_hot):
    """-sum(one_hot * log(probs)), with probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if probs.shape != one_hot.shape:
        raise ConfigurationError("probs and one_hot shapes differ")
    return float(-np.sum(one_hot * np.log(np.maximum(probs, CE_EPS))))


# -- per-layer forward/backward ------------------------------------------------
# Each forward returns (output, cache); each backward returns (grad_input, grads).


def _dense_forward(p, x):
    return x @ p["W"] + p["b"], x


def _dense_backward(p, x, dy):
    return dy @ p["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


def _conv_forward(p, x, spec):
    B, C, n = x.shape
    k, v = spec.kernel_size, spec.stride
    left, right, out = _pad_amounts(n, k, v)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    # (B, C, out, k) -> (B, out, C*k)
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::v][:, :, :out]
    cols = cols.transpose(0, 2, 1, 3).reshape(B, out, C * k)
    y = cols @ p["W"] + p["b"]
    return y.transpose(0, 2, 1), (cols, xp.shape, left, n)


def _conv_backward(p, cache, dy, spec):
    cols, padded_shape, left, n = cache
    B, _, out = dy.shape
    k, v = spec.kernel_size, spec.stride
    dyt = dy.transpose(0, 2, 1)  # (B, out, F)
    dW = cols.reshape(-1, cols.shape[-1]).T @ dyt.reshape(-1, dyt.shape[-1])
    db = dyt.sum(axis=(0, 1))
    C = padded_shape[1]
    dcols = (dyt @ p["W"].T).reshape(B, out, C, k)
    dxp = np.zeros(padded_shape)
    stop = (out - 1) * v + 1
    for j in range(k):
        dxp[:, :, j : j + stop : v] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, left : left + n], {"W": dW, "b": db}


def _pool_forward(x, spec):
    B, C, n = x.shape
    k, v = spec.kernel_size, spec.stride
    left, right, out = _pad_amounts(n, k, v)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)), constant_values=-np.inf)
    win = sliding_window_view(xp, k, axis=2)[:, :, ::v][:, :, :out]
    arg = np.argmax(win, axis=3)
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return y, (arg, xp.shape, left, n)


def _pool_backward(cache, dy, spec):
    arg, padded_shape, left, n = cache
    B, C, out = dy.shape
    Lp = padded_shape[2]
    src = arg + spec.stride * np.arange(out)
    src = src + Lp * np.arange(B * C).reshape(B, C, 1)
    dxp = np.bincount(src.ravel(), weights=dy.ravel(), minlength=B * C * Lp)
    return dxp.reshape(padded_shape)[:, :, left : left + n], {}


class Network:
    """Feed-forward stack of :class:`LayerSpec` layers with their weights.

    ``input_shape`` is the per-sample shape, ``(n,)`` for vectors or
    ``(channels, n)`` for signals. A vector input feeding a conv layer is
    treated as a single-channel signal.
    """

    def __init__(self, specs, input_shape, seed=0, params=None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.specs = []
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for spec in specs:
            spec, shape = self._resolve(spec, shape)
            self.specs.append(spec)
            self.shapes.append(shape)
        if params is None:
            params = self._init_params(np.random.default_rng(self.seed))
        self.params = params
        self._check_params()

    @staticmethod
    def _resolve(spec, shape):
        kind = spec.kind
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"dense layer needs a flat input, got {shape}")
            if spec.out_features < 1:
                raise ConfigurationError("dense out_features must be >= 1")
            return LayerSpec("dense", in_features=shape[0], out_features=spec.out_features), (
                spec.out_features,
            )
        if kind in ("conv1d", "maxpool1d"):
            if len(shape) == 1:
                shape = (1, shape[0])
            C, n = shape
            out = same_padding_length(n, spec.stride)
            if kind == "conv1d":
                if spec.out_features < 1:
                    raise ConfigurationError("conv1d out_features must be >= 1")
                resolved = LayerSpec(
                    "conv1d", spec.kernel_size, spec.stride, C, spec.out_features
                )
                return resolved, (spec.out_features, out)
            return LayerSpec("maxpool1d", spec.kernel_size, spec.stride, C, C), (C, out)
        if kind == "flatten":
            size = int(np.prod(shape))
            return LayerSpec("flatten", in_features=size, out_features=size), (size,)
        width = shape[0] if len(shape) == 1 else int(np.prod(shape))
        if kind == "softmax" and len(shape) != 1:
            raise ConfigurationError("softmax needs a flat input")
        return LayerSpec(kind, in_features=width, out_features=width), shape

    def _init_params(self, rng):
        params = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                fan_in = spec.in_features
                shape = (spec.in_features, spec.out_features)
            elif spec.kind == "conv1d":
                fan_in = spec.in_features * spec.kernel_size
                shape = (fan_in, spec.out_features)
            else:
                params.append({})
                continue
            limit = np.sqrt(6.0 / fan_in)
            if i + 1 < len(self.specs) and self.specs[i + 1].kind == "softmax":
                limit *= 0.01  # start from near-uniform class probabilities
            params.append(
                {
                    "W": rng.uniform(-limit, limit, size=shape),
                    "b": np.zeros(spec.out_features),
                }
            )
        return params

    def _check_params(self):
        if len(self.params) != len(self.specs):
            raise ConfigurationError("parameter list does not match layers")
        for p in self.params:
            for arr in p.values():
                if not np.all(np.isfinite(arr)):
                    raise ConfigurationError("non-finite weights")

    @property
    def output_width(self):
        return int(np.prod(self.shapes[-1]))

    def n_parameters(self):
        return sum(a.size for p in self.params for a in p.values())

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        return x, single

    def _forward_layers(self, x, stop, keep_cache):
        caches = []
        for spec, p in zip(self.specs[:stop], self.params[:stop]):
            kind = spec.kind
            if kind in ("conv1d", "maxpool1d") and x.ndim == 2:
                x = x[:, None, :]
            if kind == "dense":
                x, cache = _dense_forward(p, x)
            elif kind == "conv1d":
                x, cache = _conv_forward(p, x, spec)
            elif kind == "maxpool1d":
                x, cache = _pool_forward(x, spec)
            elif kind == "relu":
                cache = x > 0
                x = x * cache
            elif kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            else:
                x = softmax(x, axis=1)
                cache = x
            if keep_cache:
                caches.append(cache)
        return x, caches

    def forward(self, x):
        """Run the network on one sample or a batch."""
        x, single = self._as_batch(x)
        y, _ = self._forward_layers(x, len(self.specs), False)
        return y[0] if single else y

    def logits(self, x):
        """Forward pass stopping before a trailing softmax layer."""
        x, single = self._as_batch(x)
        stop = len(self.specs) - (self.specs[-1].kind == "softmax")
        y, _ = self._forward_layers(x, stop, False)
        return y[0] if single else y

    def loss_and_grads(self, x, y, loss="mse"):
        """Mean batch loss and parameter gradients.

        ``loss="mse"`` is ``0.5 * ||y - out||^2`` per sample; ``loss="cross_entropy"``
        takes integer class targets and applies softmax to the pre-softmax output.
        """
        x, _ = self._as_batch(x)
        B = x.shape[0]
        stop = len(self.specs) - (self.specs[-1].kind == "softmax")
        out, caches = self._forward_layers(x, stop, True)
        if loss == "mse":
            diff = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
            value = 0.5 * float(np.sum(diff * diff)) / B
            dy = diff / B
        elif loss == "cross_entropy":
            targets = np.asarray(y, dtype=np.int64)
            probs = softmax(out, axis=1)
            picked = probs[np.arange(B), targets]
            value = float(-np.mean(np.log(np.maximum(picked, CE_EPS))))
            dy = probs.copy()
            dy[np.arange(B), targets] -= 1.0
            dy /= B
        else:
            raise ConfigurationError(f"unknown loss {loss!r}")
        grads = [dict() for _ in self.specs]
        for i in range(stop - 1, -1, -1):
            spec, p, cache = self.specs[i], self.params[i], caches[i]
            kind = spec.kind
            if kind == "dense":
                dy, grads[i] = _dense_backward(p, cache, dy)
            elif kind == "conv1d":
                dy, grads[i] = _conv_backward(p, cache, dy, spec)
            elif kind == "maxpool1d":
                dy, grads[i] = _pool_backward(cache, dy, spec)
            elif kind == "relu":
                dy = dy * cache
            elif kind == "flatten":
                dy = dy.reshape(cache)
            else:
                raise ConfigurationError("softmax is only supported as the final layer")
            if i > 0 and dy.ndim == 3 and self.shapes[i] != dy.shape[1:]:
                dy = dy.reshape((B,) + self.shapes[i])
        return value, grads

    def copy(self):
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return Network(self.specs, self.input_shape, self.seed, params=params)

    def layer_table(self):
        return [asdict(s) for s in self.specs]


class SGD:
    """Mini-batch SGD with classical momentum; owns the velocity buffers."""

    def __init__(self, learning_rate=0.01, momentum=0.9):
        if learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = None

    def step(self, net, x, y, loss="mse"):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grads = net.loss_and_grads(x, y, loss)
        bad = [
            (i, name)
            for i, g in enumerate(grads)
            for name, arr in g.items()
            if not np.all(np.isfinite(arr))
        ]
        if bad or not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss/gradient (loss={value}, layers={bad})", [value]
            )
        if self._velocity is None:
            self._velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
        for p, g, vel in zip(net.params, grads, self._velocity):
            for name in p:
                vel[name] *= self.momentum
                vel[name] -= self.learning_rate * g[name]
                p[name] += vel[name]
        return value


def sgd_step(net, batch, learning_rate, momentum=0.9, loss="mse", optimizer=None):
    """One optimisation step on ``batch = (x, y)``; returns ``(net, loss)``.

    Pass the same ``optimizer`` across calls to keep momentum state.
    """
    if not len(batch[0]):
        raise ConfigurationError("empty batch")
    if learning_rate < 0:
        raise ConfigurationError("learning_rate must be >= 0")
    opt = optimizer or SGD(learning_rate, momentum)
    value = opt.step(net, batch[0], batch[1], loss)
    return net, value


def numerical_gradients(net, x, y, loss="mse", h=1e-6):
    """Central finite-difference gradients, for checking backprop."""
    grads = []
    for p in net.params:
        g = {}
        for name, arr in p.items():
            est = np.zeros_like(arr)
            flat = arr.reshape(-1)
            out = est.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                plus, _ = net.loss_and_grads(x, y, loss)
                flat[j] = old - h
                minus, _ = net.loss_and_grads(x, y, loss)
                flat[j] = old
                out[j] = (plus - minus) / (2 * h)
            g[name] = est
        grads.append(g)
    return grads


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, net, meta=None, arrays=None):
    """Write weights plus metadata. Arrays are little-endian float64."""
    arrays = dict(arrays or {})
    blobs = []
    table = []
    for spec, p in zip(net.specs, net.params):
        entry = {"spec": asdict(spec), "params": []}
        for name in sorted(p):
            entry["params"].append({"name": name, "shape": list(p[name].shape)})
            blobs.append(p[name])
        table.append(entry)
    extras = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        extras.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr)
    header = {
        "version": 1,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "layers": table,
        "arrays": extras,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, meta, arrays)``."""
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a network checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("version") != 1:
        raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        return arr.astype(np.float64)

    specs, params = [], []
    for entry in header["layers"]:
        specs.append(LayerSpec(**entry["spec"]))
        params.append({p["name"]: take(tuple(p["shape"])) for p in entry["params"]})
    arrays = {a["name"]: take(tuple(a["shape"])) for a in header["arrays"]}
    net = Network(specs, header["input_shape"], header["seed"], params=params)
    return net, header["meta"], arrays
