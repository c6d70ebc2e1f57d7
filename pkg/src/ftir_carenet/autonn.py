"""A small deterministic numpy network engine.

Layers work on channel-last batches ``(N, H, W, C)`` in float64 and cache
what they need for an exact reverse pass. Only what the dual-path network
requires is here: 1x1/3x3 same-padded convolutions, 2x2 max pooling,
global average pooling, dense layers, activations, the four task losses,
He-normal initialisation, Adam and cosine decay with warm restarts.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GraphError, LossError

CLIP_EPS = 1e-7


def he_normal_init(shape, fan_in: int, seed=None) -> np.ndarray:
    """Draws from N(0, sqrt(2 / fan_in)); ``seed`` may be an int or a Generator."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def initialize(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    """Same-padded, stride-1 convolution; kernel layout (kh, kw, Cin, F)."""

    kind = "conv"

    def __init__(self, in_channels: int, filters: int, kernel_size: int = 3, name=None):
        super().__init__(name)
        if kernel_size < 1:
            raise GraphError(f"{self.name}: kernel size must be >= 1")
        self.in_channels, self.filters, self.k = in_channels, filters, kernel_size
        self.params = {
            "kernel": np.zeros((kernel_size, kernel_size, in_channels, filters)),
            "bias": np.zeros(filters),
        }
        self.zero_grad()

    def initialize(self, rng):
        fan_in = self.k * self.k * self.in_channels
        self.params["kernel"] = he_normal_init(self.params["kernel"].shape, fan_in, rng)
        self.params["bias"] = np.zeros(self.filters)
        self.zero_grad()

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.in_channels:
            raise GraphError(f"{self.name}: expected (H, W, {self.in_channels}) input, got {shape}")
        return (shape[0], shape[1], self.filters)

    def _pad(self):
        lo = (self.k - 1) // 2
        return lo, self.k - 1 - lo

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise GraphError(f"{self.name}: expected (N, H, W, {self.in_channels}), got {x.shape}")
        K, b = self.params["kernel"], self.params["bias"]
        n, h, w, _ = x.shape
        if self.k == 1:
            self._x = x
            return x @ K[0, 0] + b
        lo, hi = self._pad()
        xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
        self._xp = xp
        out = np.broadcast_to(b, (n, h, w, self.filters)).copy()
        for i in range(self.k):
            for j in range(self.k):
                out += xp[:, i : i + h, j : j + w, :] @ K[i, j]
        return out

    def backward(self, dout):
        K = self.params["kernel"]
        self.grads["bias"] = self.grads["bias"] + dout.sum(axis=(0, 1, 2))
        flat = dout.reshape(-1, self.filters)
        if self.k == 1:
            x = self._x
            self.grads["kernel"] = self.grads["kernel"] + (
                x.reshape(-1, self.in_channels).T @ flat
            )[None, None]
            return dout @ K[0, 0].T
        xp = self._xp
        n, h, w, _ = dout.shape
        dxp = np.zeros_like(xp)
        dK = np.zeros_like(K)
        for i in range(self.k):
            for j in range(self.k):
                xs = xp[:, i : i + h, j : j + w, :]
                dK[i, j] = xs.reshape(-1, self.in_channels).T @ flat
                dxp[:, i : i + h, j : j + w, :] += dout @ K[i, j].T
        self.grads["kernel"] = self.grads["kernel"] + dK
        lo, _ = self._pad()
        return dxp[:, lo : lo + h, lo : lo + w, :]


class MaxPool2D(Layer):
    """2x2 stride-2 max pooling; odd sizes are zero padded at the bottom/right.

    Ties route the gradient to the first maximum in row-major window order.
    """

    kind = "maxpool"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise GraphError(f"{self.name}: expected (H, W, C) input, got {shape}")
        return (math.ceil(shape[0] / 2), math.ceil(shape[1] / 2), shape[2])

    def forward(self, x):
        if x.ndim != 4:
            raise GraphError(f"{self.name}: expected 4-D input, got {x.shape}")
        n, h, w, c = x.shape
        h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
        if (h % 2) or (w % 2):
            x = np.pad(x, ((0, 0), (0, 2 * h2 - h), (0, 2 * w2 - w), (0, 0)))
        win = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        self._arg = np.argmax(win, axis=-1)
        self._in_shape = (n, h, w, c)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, h, w, c = self._in_shape
        h2, w2 = dout.shape[1], dout.shape[2]
        win = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(win, self._arg[..., None], dout[..., None], axis=-1)
        dx = win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        return dx[:, :h, :w, :]


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise GraphError(f"{self.name}: expected (H, W, C) input, got {shape}")
        return (shape[2],)

    def forward(self, x):
        if x.ndim != 4:
            raise GraphError(f"{self.name}: expected 4-D input, got {x.shape}")
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        n, h, w, c = self._in_shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), self._in_shape).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, name=None):
        super().__init__(name)
        self.in_features, self.units = in_features, units
        self.params = {"kernel": np.zeros((in_features, units)), "bias": np.zeros(units)}
        self.zero_grad()

    def initialize(self, rng):
        self.params["kernel"] = he_normal_init((self.in_features, self.units), self.in_features, rng)
        self.params["bias"] = np.zeros(self.units)
        self.zero_grad()

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise GraphError(f"{self.name}: expected ({self.in_features},) input, got {shape}")
        return (self.units,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise GraphError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dout):
        self.grads["kernel"] = self.grads["kernel"] + self._x.T @ dout
        self.grads["bias"] = self.grads["bias"] + dout.sum(axis=0)
        return dout @ self.params["kernel"].T


class Activation(Layer):
    kind = "activation"
    FUNCS = ("relu", "sigmoid", "softmax", "linear")

    def __init__(self, func: str = "relu", name=None):
        if func not in self.FUNCS:
            raise GraphError(f"unknown activation {func!r}")
        super().__init__(name or func)
        self.func = func

    def forward(self, x):
        if self.func == "relu":
            self._x = x
            return np.maximum(x, 0.0)
        if self.func == "sigmoid":
            self._y = sigmoid(x)
            return self._y
        if self.func == "softmax":
            self._y = softmax(x)
            return self._y
        return x

    def backward(self, dout):
        if self.func == "relu":
            return dout * (self._x > 0)
        if self.func == "sigmoid":
            return dout * self._y * (1.0 - self._y)
        if self.func == "softmax":
            y = self._y
            return y * (dout - np.sum(dout * y, axis=-1, keepdims=True))
        return dout


class Sequential:
    """Chain of layers. Keeps every intermediate output and output gradient
    of the last pass, which is what Grad-CAM reads."""

    def __init__(self, layers: list[Layer], input_shape: tuple | None = None, name: str = ""):
        self.layers = list(layers)
        self.name = name
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise GraphError(f"duplicate layer names in {name or 'sequential'}: {names}")
        self.input_shape = input_shape
        if input_shape is not None:
            self.output_shape(input_shape)
        self.outputs: dict[str, np.ndarray] = {}
        self.output_grads: dict[str, np.ndarray] = {}

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(tuple(shape))
        return shape

    def initialize(self, rng):
        for layer in self.layers:
            layer.initialize(rng)

    def forward(self, x):
        self.outputs = {}
        for layer in self.layers:
            x = layer.forward(x)
            self.outputs[layer.name] = x
        return x

    def backward(self, dout):
        self.output_grads = {}
        for layer in reversed(self.layers):
            self.output_grads[layer.name] = dout
            dout = layer.backward(dout)
        return dout

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise GraphError(f"layer {name!r} not found in {self.name or 'sequential'}")

    def named_layers(self):
        for l in self.layers:
            yield l.name, l

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        lname, pname = key.rsplit(".", 1)
        layer = self.layer(lname)
        if layer.params[pname].shape != value.shape:
            raise GraphError(f"{key}: shape {value.shape} != {layer.params[pname].shape}")
        layer.params[pname] = np.array(value, dtype=np.float64)

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()


def network_eval(model, x: np.ndarray) -> np.ndarray:
    """Forward pass; the model keeps its cached activations."""
    return model.forward(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# losses


def head_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind in ("binary", "ordinal"):
        return sigmoid(z)
    if kind == "onehot":
        return softmax(z)
    if kind == "regression":
        return np.asarray(z, dtype=np.float64)
    raise LossError(f"unknown schema kind {kind!r}")


def _per_sample_loss(kind, z, y):
    """Per-sample loss and its exact derivative wrt the logits ``z``."""
    if kind == "binary":
        s = sigmoid(z)
        p = np.clip(s, CLIP_EPS, 1.0 - CLIP_EPS)
        loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1)
        inside = (s > CLIP_EPS) & (s < 1.0 - CLIP_EPS)
        return loss, np.where(inside, s - y, 0.0)
    if kind == "onehot":
        s = softmax(z)
        q = np.clip(s, CLIP_EPS, 1.0 - CLIP_EPS)
        loss = -(y * np.log(q)).sum(axis=1)
        inside = (s > CLIP_EPS) & (s < 1.0 - CLIP_EPS)
        g = np.where(inside, -y / q, 0.0)
        return loss, s * (g - np.sum(g * s, axis=1, keepdims=True))
    if kind == "ordinal":
        s = sigmoid(z)
        return ((s - y) ** 2).sum(axis=1), 2.0 * (s - y) * s * (1.0 - s)
    if kind == "regression":
        return ((z - y) ** 2).sum(axis=1), 2.0 * (z - y)
    raise LossError(f"unknown schema kind {kind!r}")


def loss_and_grad(kind: str, logits, target, weight=1.0):
    """Batch loss ``mean_i(w_i * l_i)`` and d(loss)/d(logits).

    Regression ignores the class weight.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if z.shape != y.shape:
        raise LossError(f"logits {z.shape} and targets {y.shape} differ in shape")
    n = z.shape[0]
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (n,))
    if kind == "regression":
        w = np.ones(n)
    per, dz = _per_sample_loss(kind, z, y)
    loss = float(np.sum(w * per) / n)
    if not math.isfinite(loss):
        raise LossError(f"{kind} loss is not finite ({loss})")
    return loss, dz * (w / n)[:, None]


def compute_loss(kind: str, logits, target, weight=1.0) -> float:
    return loss_and_grad(kind, logits, target, weight)[0]


def network_grad(model, x, target, kind: str, weight=1.0):
    """Loss and exact reverse-mode gradients for every parameter of ``model``."""
    model.zero_grad()
    logits = network_eval(model, x)
    loss, dz = loss_and_grad(kind, logits, target, weight)
    model.backward(dz)
    return loss, {k: v.copy() for k, v in model.gradients().items()}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        """Bias-corrected Adam update; returns the new parameter dict."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        new = {}
        for k, p in params.items():
            g = grads[k]
            if p.shape != g.shape:
                raise GraphError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            new[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return new


def adam_step(state: Adam, params: dict, grads: dict, lr: float) -> dict:
    return state.step(params, grads, lr)


@dataclass
class ScheduleConfig:
    initial_lr: float = 1e-3
    first_decay_steps: int = 100
    t_mul: float = 1.5
    m_mul: float = 1.0
    alpha: float = 1e-5

    def validate(self) -> "ScheduleConfig":
        for name in ("initial_lr", "first_decay_steps", "t_mul", "m_mul", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"schedule {name} must be positive")
        if not self.alpha < self.initial_lr:
            raise ValueError("schedule alpha must be below initial_lr")
        return self


def schedule_cycle(config: ScheduleConfig, step: float) -> tuple[int, float, float]:
    """(cycle index, steps into the cycle, cycle length) for ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    i, t, length = 0, float(step), float(config.first_decay_steps)
    while t >= length:
        t -= length
        length *= config.t_mul
        i += 1
    return i, t, length


def lr_at_step(config: ScheduleConfig, step: float) -> float:
    """Cosine decay with warm restarts, floored at ``alpha`` (absolute)."""
    i, t, length = schedule_cycle(config, step)
    peak = config.initial_lr * config.m_mul**i
    return config.alpha + (peak - config.alpha) * 0.5 * (1.0 + math.cos(math.pi * t / length))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict, meta: dict | None = None) -> None:
    """Binary blob file plus ``<path>.json`` manifest.

    Blob file: magic, u32 version, u32 parameter count, then each parameter
    as little-endian float64 in manifest order.
    """
    path = Path(path)
    blobs, entries, offset = [], [], 12
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        blobs.append(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    payload = struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(entries)) + b"".join(blobs)
    path.write_bytes(payload)
    sidecar = {
        "version": CKPT_VERSION,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "params": entries,
        "meta": meta or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    payload = path.read_bytes()
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    magic, version, count = struct.unpack_from("<4sII", payload, 0)
    if magic != CKPT_MAGIC:
        raise GraphError(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION or sidecar["version"] != version:
        raise GraphError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(payload).hexdigest() != sidecar["sha256"]:
        raise GraphError(f"{path}: checksum does not match its manifest")
    if count != len(sidecar["params"]):
        raise GraphError(f"{path}: parameter count mismatch")
    params = {}
    for e in sidecar["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, sidecar["meta"]
