"""Dual-path (spectral 1x1 / spatial 3x3) patch classifier and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autonn
from .autonn import (
    Activation,
    Adam,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2D,
    ScheduleConfig,
    Sequential,
)
from .exceptions import ConfigError, GraphError, LossError
from .labels import (
    REGRESSION,
    TaskSchema,
    decode_index,
    decode_output,
    encode_labels,
    get_schema,
    sample_weights,
    unscale_fraction,
)
from .spectra import Patch

logger = logging.getLogger(__name__)


@dataclass
class CaReNetConfig:
    input_shape: tuple[int, int, int] = (32, 32, 467)
    spectral_filters: tuple[int, ...] = (128, 256, 512)
    spatial_filters: tuple[int, ...] = (128, 256, 512)
    spectral_pool: tuple[bool, ...] | None = None
    spatial_pool: tuple[bool, ...] | None = None
    fusion_units: int = 512

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.spectral_filters = tuple(int(v) for v in self.spectral_filters)
        self.spatial_filters = tuple(int(v) for v in self.spatial_filters)
        if self.spectral_pool is None:
            self.spectral_pool = (True,) * len(self.spectral_filters)
        if self.spatial_pool is None:
            self.spatial_pool = (True,) * len(self.spatial_filters)
        self.spectral_pool = tuple(bool(v) for v in self.spectral_pool)
        self.spatial_pool = tuple(bool(v) for v in self.spatial_pool)

    def validate(self) -> "CaReNetConfig":
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H, W, C) positive, got {self.input_shape}")
        for path in ("spectral", "spatial"):
            filters = getattr(self, f"{path}_filters")
            pools = getattr(self, f"{path}_pool")
            if not filters or min(filters) < 1:
                raise ConfigError(f"{path} path needs at least one stage with positive filters")
            if len(pools) != len(filters):
                raise ConfigError(f"{path}_pool needs one flag per stage")
        if self.fusion_units < 1:
            raise ConfigError("fusion_units must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _path(prefix: str, in_ch: int, filters, pools, kernel: int) -> Sequential:
    layers = []
    for i, (f, pool) in enumerate(zip(filters, pools), start=1):
        layers.append(Conv2D(in_ch, f, kernel, name=f"{prefix}_conv{i}"))
        layers.append(Activation("relu", name=f"{prefix}_relu{i}"))
        if pool:
            layers.append(MaxPool2D(name=f"{prefix}_pool{i}"))
        in_ch = f
    layers.append(GlobalAvgPool(name=f"{prefix}_gap"))
    return Sequential(layers, name=prefix)


class DualPathNetwork:
    """Two parallel paths from the shared input, each ending in global
    average pooling; the pooled vectors are concatenated and fed to a fused
    dense layer and the task head. The network emits logits."""

    def __init__(self, config: CaReNetConfig, schema: TaskSchema, seed: int = 0):
        self.config = config.validate()
        self.schema = schema
        c = config.input_shape[2]
        self.spectral = _path("spectral", c, config.spectral_filters, config.spectral_pool, 1)
        self.spatial = _path("spatial", c, config.spatial_filters, config.spatial_pool, 3)
        n_gap = config.spectral_filters[-1] + config.spatial_filters[-1]
        self.head = Sequential(
            [
                Dense(n_gap, config.fusion_units, name="fusion_dense"),
                Activation("relu", name="fusion_relu"),
                Dense(config.fusion_units, schema.output_dim, name="output"),
            ],
            name="head",
        )
        for seq in (self.spectral, self.spatial):
            seq.output_shape(config.input_shape)
        rng = np.random.default_rng(seed)
        for seq in (self.spectral, self.spatial, self.head):
            seq.initialize(rng)
        self.n_spectral_gap = config.spectral_filters[-1]

    @property
    def paths(self):
        return (self.spectral, self.spatial, self.head)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise GraphError(f"input shape {x.shape[1:]} != network input {self.config.input_shape}")
        gs = self.spectral.forward(x)
        gp = self.spatial.forward(x)
        self.gap_features = np.concatenate([gs, gp], axis=1)
        return self.head.forward(self.gap_features)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        dg = self.head.backward(dlogits)
        k = self.n_spectral_gap
        return self.spectral.backward(dg[:, :k]) + self.spatial.backward(dg[:, k:])

    def zero_grad(self):
        for p in self.paths:
            p.zero_grad()

    def parameters(self) -> dict:
        out = {}
        for p in self.paths:
            out.update(p.parameters())
        return out

    def gradients(self) -> dict:
        out = {}
        for p in self.paths:
            out.update(p.gradients())
        return out

    def set_parameters(self, params: dict) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise GraphError(f"missing parameters: {sorted(missing)}")
        for key, value in params.items():
            for p in self.paths:
                try:
                    p.set_parameter(key, np.asarray(value))
                    break
                except GraphError as exc:
                    if "not found" not in str(exc):
                        raise
            else:
                raise GraphError(f"unknown parameter {key!r}")

    def layer(self, name: str):
        for p in self.paths:
            for lname, layer in p.named_layers():
                if lname == name:
                    return p, layer
        raise GraphError(f"layer {name!r} not found")

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Activated outputs (probabilities, or the scaled regression value)."""
        x = np.asarray(x, dtype=np.float64)
        outs = [
            autonn.head_activation(self.schema.kind, self.forward(x[i : i + batch_size]))
            for i in range(0, x.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)


NetworkGraph = DualPathNetwork


def build_carenet(config: CaReNetConfig, schema: TaskSchema, seed: int = 0) -> DualPathNetwork:
    return DualPathNetwork(config, schema, seed)


def count_params(config: CaReNetConfig, schema: TaskSchema) -> int:
    """Closed-form parameter count (conv: kh*kw*Cin*F + F; dense: in*out + out)."""
    config.validate()
    c = config.input_shape[2]
    total = 0
    for kernel, filters in ((1, config.spectral_filters), (3, config.spatial_filters)):
        cin = c
        for f in filters:
            total += kernel * kernel * cin * f + f
            cin = f
    n_gap = config.spectral_filters[-1] + config.spatial_filters[-1]
    total += n_gap * config.fusion_units + config.fusion_units
    total += config.fusion_units * schema.output_dim + schema.output_dim
    return total


# ---------------------------------------------------------------------------
# augmentation

# index -> (quarter turns, flip first); identity is 0
D4 = tuple((k % 4, k >= 4) for k in range(8))


def dihedral(x: np.ndarray, index: int) -> np.ndarray:
    """Apply one of the 8 square symmetries to the spatial axes of (H, W, C)."""
    turns, flip = D4[index]
    if flip:
        x = x[:, ::-1]
    return np.rot90(x, turns, axes=(0, 1))


def augment_patch(patch: Patch, rng: np.random.Generator) -> Patch:
    """Random square symmetry (uniform over the 8 rotations/flips)."""
    if patch.data.shape[0] != patch.data.shape[1]:
        raise ValueError(f"augmentation needs square patches, got {patch.data.shape[:2]}")
    k = int(rng.integers(8))
    return Patch(
        data=np.ascontiguousarray(dihedral(patch.data, k)),
        origin=patch.origin,
        zero_count=patch.zero_count,
        sample_id=patch.sample_id,
        patient_id=patch.patient_id,
        label=patch.label,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 300
    seed: int = 0
    augment: bool = True
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    # None: one decay step per training batch of an epoch
    first_decay_steps: int | None = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return self


@dataclass
class TrainResult:
    best_params: dict
    history: list[dict]
    best_epoch: int | None
    best_metric: float | None
    adam_steps: int


def dev_metric(schema: TaskSchema, outputs: np.ndarray, targets: np.ndarray) -> float:
    """Patch accuracy, or mean absolute error on the fraction scale for regression."""
    if schema.kind == REGRESSION:
        return float(np.mean(np.abs(outputs[:, 0] - targets[:, 0])))
    pred = [decode_index(schema, o) for o in outputs]
    truth = [decode_index(schema, t) for t in targets]
    return float(np.mean(np.equal(pred, truth)))


def _better(schema, new, best, new_loss=None, best_loss=None):
    """Strictly better dev metric; equal metrics fall back to lower dev loss."""
    if best is None:
        return True
    if new == best:
        return new_loss is not None and best_loss is not None and new_loss < best_loss
    return new < best if schema.kind == REGRESSION else new > best


def train_model(
    graph: DualPathNetwork,
    X_train: np.ndarray,
    y_train,
    X_dev: np.ndarray,
    y_dev,
    config: TrainConfig | None = None,
    weights: np.ndarray | None = None,
) -> TrainResult:
    """Minibatch Adam with cosine warm restarts and best-dev checkpointing.

    ``y_*`` are raw labels (class names or percentages); ``weights`` are
    per-training-sample loss weights (default: balanced class weights).
    Every epoch reshuffles and re-augments the training set from a seed
    derived from ``(config.seed, epoch)``.
    """
    config = (config or TrainConfig()).validate()
    schema = graph.schema
    X_train = np.asarray(X_train, dtype=np.float64)
    X_dev = np.asarray(X_dev, dtype=np.float64)
    if X_train.shape[0] == 0 or X_dev.shape[0] == 0:
        raise ValueError("train and dev sets must be non-empty")
    t_train = encode_labels(schema, y_train)
    t_dev = encode_labels(schema, y_dev)
    if weights is None:
        weights = sample_weights(schema, y_train)
    weights = np.asarray(weights, dtype=np.float64)

    n = X_train.shape[0]
    n_batches = math.ceil(n / config.batch_size)
    sched = ScheduleConfig(
        initial_lr=config.schedule.initial_lr,
        first_decay_steps=config.first_decay_steps or n_batches,
        t_mul=config.schedule.t_mul,
        m_mul=config.schedule.m_mul,
        alpha=config.schedule.alpha,
    ).validate()

    opt = Adam()
    best = {k: v.copy() for k, v in graph.parameters().items()}
    best_metric, best_loss, best_epoch, history, step = None, None, None, [], 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            xb = X_train[idx]
            if config.augment:
                ks = rng.integers(8, size=idx.size)
                xb = np.stack([dihedral(x, k) for x, k in zip(xb, ks)])
            lr = autonn.lr_at_step(sched, step)
            try:
                loss, grads = autonn.network_grad(graph, xb, t_train[idx], schema.kind, weights[idx])
            except LossError as exc:
                raise LossError(f"epoch {epoch} batch {b} (lr={lr:.3g}): {exc}") from exc
            graph.set_parameters(opt.step(graph.parameters(), grads, lr))
            total += loss * idx.size
            step += 1
        dev_logits = graph.forward(X_dev)
        metric = dev_metric(schema, autonn.head_activation(schema.kind, dev_logits), t_dev)
        dev_loss = autonn.compute_loss(schema.kind, dev_logits, t_dev)
        if _better(schema, metric, best_metric, dev_loss, best_loss):
            best_metric, best_loss, best_epoch = metric, dev_loss, epoch
            best = {k: v.copy() for k, v in graph.parameters().items()}
        history.append(
            {
                "epoch": epoch,
                "train_loss": total / n,
                "dev_metric": metric,
                "dev_loss": dev_loss,
                "best_dev_metric": best_metric,
                "lr": lr,
            }
        )
        logger.debug("epoch %d loss %.5f dev %.4f", epoch, total / n, metric)
    graph.set_parameters(best)
    return TrainResult(best, history, best_epoch, best_metric, opt.t)


def predict_patch(graph: DualPathNetwork, patch) -> np.ndarray:
    """Activated output vector for one patch (no augmentation)."""
    data = patch.data if isinstance(patch, Patch) else patch
    return graph.predict(np.asarray(data)[None])[0]


# ---------------------------------------------------------------------------
# estimator


class CaReNetEstimator(BaseEstimator):
    """scikit-learn style wrapper: ``fit(X, y)`` on patch arrays ``(N, H, W, C)``.

    ``predict`` returns decoded labels (class names, or percentages for
    Ki67); ``predict_raw`` returns activated network outputs.
    """

    def __init__(
        self,
        task="subtype",
        spectral_filters=(128, 256, 512),
        spatial_filters=(128, 256, 512),
        fusion_units=512,
        epochs=300,
        batch_size=10,
        initial_lr=1e-3,
        t_mul=1.5,
        m_mul=1.0,
        alpha=1e-5,
        augment=True,
        class_weighting=True,
        seed=0,
    ):
        self.task = task
        self.spectral_filters = spectral_filters
        self.spatial_filters = spatial_filters
        self.fusion_units = fusion_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.t_mul = t_mul
        self.m_mul = m_mul
        self.alpha = alpha
        self.augment = augment
        self.class_weighting = class_weighting
        self.seed = seed

    def _schema(self):
        return self.task if isinstance(self.task, TaskSchema) else get_schema(self.task)

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected patches of shape (N, H, W, C), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("patches contain non-finite values")
        return X

    def fit(self, X, y, X_dev=None, y_dev=None):
        X = self._check_X(X)
        y = list(y)
        if X_dev is None:
            X_dev, y_dev = X, y
        X_dev = self._check_X(X_dev)
        schema = self._schema()
        config = CaReNetConfig(
            input_shape=X.shape[1:],
            spectral_filters=tuple(self.spectral_filters),
            spatial_filters=tuple(self.spatial_filters),
            fusion_units=self.fusion_units,
        )
        self.graph_ = build_carenet(config, schema, seed=self.seed)
        weights = sample_weights(schema, y) if self.class_weighting else np.ones(len(y))
        tc = TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            augment=self.augment,
            schedule=ScheduleConfig(self.initial_lr, 1, self.t_mul, self.m_mul, self.alpha),
        )
        result = train_model(self.graph_, X, y, X_dev, list(y_dev), tc, weights)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.schema_ = schema
        if schema.is_classification:
            self.classes_ = np.array(schema.classes)
        self.n_features_in_ = X.shape[-1]
        return self

    def predict_raw(self, X):
        check_is_fitted(self, "graph_")
        return self.graph_.predict(self._check_X(X))

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        return self.graph_.forward(self._check_X(X))

    def predict(self, X):
        raw = self.predict_raw(X)
        if self.schema_.kind == REGRESSION:
            return unscale_fraction(self.schema_, raw[:, 0])
        return np.array([decode_output(self.schema_, r) for r in raw])

    def score(self, X, y):
        """Patch accuracy, or negative mean absolute percentage error for Ki67."""
        pred = self.predict(X)
        if self.schema_.kind == REGRESSION:
            return -float(np.mean(np.abs(pred - np.asarray(y, dtype=float))))
        return float(np.mean(pred == np.asarray(y, dtype=str)))

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "graph_")
        meta = {
            "task": self.schema_.task,
            "config": self.graph_.config.to_dict(),
            "estimator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()
                          if not isinstance(v, TaskSchema)},
        }
        autonn.save_checkpoint(path, self.graph_.parameters(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "CaReNetEstimator":
        params, meta = autonn.load_checkpoint(path)
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["estimator"].items()}
        est = cls(**kwargs)
        schema = get_schema(meta["task"])
        cfg = CaReNetConfig(**meta["config"])
        est.graph_ = build_carenet(cfg, schema)
        est.graph_.set_parameters(params)
        est.schema_ = schema
        if schema.is_classification:
            est.classes_ = np.array(schema.classes)
        est.n_features_in_ = cfg.input_shape[2]
        return est
