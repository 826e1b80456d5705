"""Dense MLP with softmax cross-entropy, trained by plain minibatch SGD.

Parameters live in one flat float64 vector (``ModelParams.values``) laid out
layer by layer: the row-major ``rows x cols`` weight matrix, then ``cols``
biases when the layer has them. Hidden layers use ReLU; the last layer feeds
a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import DataShard
from .seeding import mix, rng

LayerShape = tuple[int, int, bool]

SIMPLE_NN_CIFAR = "SimpleNN-CIFAR"
MLP_SYNTHETIC = "MLP-Synthetic"


class ShapeError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    """Raised when a gradient step produces NaN or Inf."""


def _count(shapes: Sequence[LayerShape]) -> int:
    return sum(r * c + (c if b else 0) for r, c, b in shapes)


@dataclass(frozen=True, eq=False)
class ModelParams:
    layer_shapes: tuple[LayerShape, ...]
    values: np.ndarray

    def __post_init__(self):
        shapes = tuple((int(r), int(c), bool(b)) for r, c, b in self.layer_shapes)
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if vals.size != _count(shapes):
            raise ShapeError(f"{vals.size} values for layer shapes needing {_count(shapes)}")
        for (_, c_prev, _), (r_next, _, _) in zip(shapes, shapes[1:]):
            if c_prev != r_next:
                raise ShapeError(f"layer output {c_prev} does not feed input {r_next}")
        vals.flags.writeable = False
        object.__setattr__(self, "layer_shapes", shapes)
        object.__setattr__(self, "values", vals)

    @property
    def param_count(self) -> int:
        return self.values.size

    @property
    def input_width(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def class_count(self) -> int:
        return self.layer_shapes[-1][1]

    def layers(self, values: np.ndarray | None = None):
        """Yield (W, b) views into ``values`` (default: this model's values)."""
        v = self.values if values is None else values
        off = 0
        for r, c, has_bias in self.layer_shapes:
            W = v[off:off + r * c].reshape(r, c)
            off += r * c
            b = None
            if has_bias:
                b = v[off:off + c]
                off += c
            yield W, b

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.param_count, dtype=bool)
        off = 0
        for r, c, has_bias in self.layer_shapes:
            off += r * c
            if has_bias:
                mask[off:off + c] = True
                off += c
        return mask

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(self.layer_shapes, values)

    def __eq__(self, other):
        # bit-exact, so -0.0 != 0.0 and equal NaN payloads compare equal
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.layer_shapes == other.layer_shapes
                and self.values.tobytes() == other.values.tobytes())

    def __hash__(self):
        return hash((self.layer_shapes, self.values.tobytes()))

    def __repr__(self):
        return f"ModelParams(layers={list(self.layer_shapes)}, param_count={self.param_count})"


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    local_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    mean_loss: float
    sample_count: int
    correct: int


# ------------------------------------------------------------------ init

def mlp_shapes(widths: Sequence[int], bias: bool = True) -> tuple[LayerShape, ...]:
    return tuple((a, b, bias) for a, b in zip(widths[:-1], widths[1:]))


def architecture_shapes(architecture_id: str, **dims) -> tuple[LayerShape, ...]:
    """Layer shapes for a named architecture.

    ``SimpleNN-CIFAR`` is 3072 -> 20 -> 10 (61,670 parameters).
    ``MLP-Synthetic`` takes ``input_dim``, ``classes`` and ``hidden`` (0 for
    a single softmax layer).
    """
    if architecture_id == SIMPLE_NN_CIFAR:
        return mlp_shapes([3072, 20, 10])
    if architecture_id == MLP_SYNTHETIC:
        hidden = dims.get("hidden", 16)
        widths = [dims.get("input_dim", 2)]
        if hidden:
            widths.append(hidden)
        widths.append(dims.get("classes", 2))
        return mlp_shapes(widths)
    raise ValueError(f"unknown architecture {architecture_id!r}")


def init_from_shapes(shapes: Sequence[LayerShape], seed: int) -> ModelParams:
    gen = rng(seed, 0x1417)
    chunks = []
    for r, c, has_bias in shapes:
        bound = 1.0 / np.sqrt(r)
        chunks.append(gen.uniform(-bound, bound, size=r * c))
        if has_bias:
            chunks.append(np.zeros(c))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ModelParams(tuple(shapes), values)


def init_model(architecture_id: str, seed: int, **dims) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    return init_from_shapes(architecture_shapes(architecture_id, **dims), seed)


# ------------------------------------------------------------- forward

def _check_width(model: ModelParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise ShapeError(
            f"batch width {x.shape[-1] if x.ndim else None} does not match model input {model.input_width}"
        )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(model: ModelParams, values: np.ndarray, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    layers = list(model.layers(values))
    for i, (W, b) in enumerate(layers):
        z = h @ W
        if b is not None:
            z = z + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else _softmax(z)
        acts.append(h)
    return acts, pre


def forward(model: ModelParams, batch: DataShard | np.ndarray) -> np.ndarray:
    x = batch.features if isinstance(batch, DataShard) else np.asarray(batch)
    _check_width(model, x)
    acts, _ = _forward_cache(model, model.values, x)
    return acts[-1]


def loss_and_grad(model: ModelParams, x: np.ndarray, y: np.ndarray,
                  values: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient w.r.t. the flat parameters."""
    v = model.values if values is None else values
    _check_width(model, x)
    n = len(y)
    acts, pre = _forward_cache(model, v, x)
    probs = acts[-1]
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300)))

    layers = list(model.layers(v))
    per_layer = [None] * len(layers)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        parts = [(acts[i].T @ delta).reshape(-1)]
        if b is not None:
            parts.append(delta.sum(axis=0))
        per_layer[i] = parts
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)
    flat = np.concatenate([p for parts in per_layer for p in parts]) if layers else np.zeros(0)
    return float(loss), flat


# ------------------------------------------------------------ training

def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return rng(seed, epoch).permutation(n)


def sgd_epoch(model: ModelParams, shard: DataShard, cfg: TrainingConfig,
              epoch: int = 0) -> ModelParams:
    """One shuffled pass over ``shard``: ``w <- w - lr * grad(w; b)`` per batch."""
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    if cfg.learning_rate == 0:
        return model
    w = model.values.copy()
    order = batch_order(len(shard), cfg.seed, epoch)
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(model, shard.features[idx], shard.labels[idx], values=w)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in epoch {epoch} at batch offset {start} "
                    f"(learning_rate={cfg.learning_rate}); lower the learning rate"
                )
            w -= cfg.learning_rate * g
    if not np.all(np.isfinite(w)):
        raise TrainingDiverged(f"non-finite weights after epoch {epoch} (learning_rate={cfg.learning_rate})")
    return model.with_values(w)


def local_training(peer_id: int, w: ModelParams, shard: DataShard,
                   cfg: TrainingConfig) -> ModelParams:
    for epoch in range(cfg.local_epochs):
        try:
            w = sgd_epoch(w, shard, cfg, epoch)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"peer {peer_id}: {exc}") from exc
    return w


# ---------------------------------------------------------- evaluation

def evaluate(model: ModelParams, testset: DataShard, chunk: int = 4096) -> EvalReport:
    """Argmax accuracy; ties go to the lowest class index."""
    n = len(testset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    _check_width(model, testset.features)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, chunk):
        x = testset.features[start:start + chunk]
        y = testset.labels[start:start + chunk]
        probs = forward(model, x)
        correct += int((probs.argmax(axis=1) == y).sum())
        loss_sum += float(-np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)).sum())
    return EvalReport(correct / n, loss_sum / n, n, correct)


# ----------------------------------------------------------- gradcheck

def numerical_grad(model: ModelParams, x: np.ndarray, y: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    base = model.values.copy()
    g = np.empty_like(base)
    for i in range(base.size):
        base[i] += eps
        fp, _ = loss_and_grad(model, x, y, values=base)
        base[i] -= 2 * eps
        fm, _ = loss_and_grad(model, x, y, values=base)
        base[i] += eps
        g[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(seed: int = 0, atol: float = 1e-7) -> float:
    """Max relative analytic-vs-central-difference error over two tiny models.

    Entries whose true gradient is below ``atol`` are compared absolutely.
    """
    worst = 0.0
    for widths in ([4, 3], [3, 4, 3]):
        gen = rng(seed, len(widths))
        model = init_from_shapes(mlp_shapes(widths), mix(seed, 7))
        # nonzero biases so ReLU kinks are not hit at exactly zero
        model = model.with_values(model.values + 0.1 * gen.normal(size=model.param_count))
        x = gen.uniform(0, 1, size=(6, widths[0]))
        y = gen.integers(0, widths[-1], size=6)
        _, analytic = loss_and_grad(model, x, y)
        numeric = numerical_grad(model, x, y)
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(numeric), np.abs(analytic))
        rel = np.where(scale > atol, err / np.maximum(scale, 1e-300), 0.0)
        abs_fail = (scale <= atol) & (err > atol)
        if abs_fail.any():
            rel = np.where(abs_fail, np.inf, rel)
        worst = max(worst, float(rel.max()))
    return worst
