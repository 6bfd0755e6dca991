"""Small trainable classifier: a one-hidden-layer MLP with plain SGD.

The defense and the gradient-free attacks are architecture agnostic, so a
compact fully-connected network stands in for a large backbone. Everything is
float64 numpy: forward, backprop, momentum SGD with L2 weight decay, and a
constant or single-cycle triangular learning-rate schedule. Training is fully
deterministic given (seed, data, config).
"""

import json
from dataclasses import dataclass

import numpy as np

from ._validation import as_labels
from .errors import DataError, TrainingDiverged

CHECKPOINT_FORMAT = "keyvote-model"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Architecture:
    """Layer sizes for the classifier: input dims -> hidden -> n_classes.

    input_center is subtracted from every input before the first layer;
    0.5 centers [0, 1] images (uncentered image inputs make SGD fragile).
    """

    input_dims: tuple  # (c, w, h) image dims, or (d,) for flat inputs
    hidden_units: int
    n_classes: int
    activation: str = "relu"
    input_center: float = 0.5

    def __post_init__(self):
        dims = tuple(int(d) for d in self.input_dims)
        object.__setattr__(self, "input_dims", dims)
        if len(dims) not in (1, 3) or any(d < 1 for d in dims):
            raise ValueError(f"input_dims must be (d,) or (c, w, h), got {dims}")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def input_dim(self):
        return int(np.prod(self.input_dims))

    def n_params(self):
        d, m, L = self.input_dim, self.hidden_units, self.n_classes
        return d * m + m + m * L + L


@dataclass
class Model:
    """Network parameters plus the seed they were initialized from."""

    arch: Architecture
    seed: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def copy(self):
        return Model(
            self.arch, self.seed, self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy()
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    learning_rate: float = 0.01
    schedule: str = "constant"  # "constant" | "triangular"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0 or self.learning_rate < 0:
            raise ValueError("momentum, weight_decay and learning_rate must be nonnegative")
        if self.schedule not in ("constant", "triangular"):
            raise ValueError("schedule must be 'constant' or 'triangular'")


def init_model(arch, seed):
    """Deterministically initialize parameters (He fan-in scaling)."""
    if not isinstance(arch, Architecture):
        raise ValueError(f"expected an Architecture, got {type(arch).__name__}")
    rng = np.random.default_rng(int(seed))
    d, m, L = arch.input_dim, arch.hidden_units, arch.n_classes
    W1 = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, m))
    b1 = np.zeros(m)
    W2 = rng.normal(0.0, np.sqrt(2.0 / m), size=(m, L))
    b2 = np.zeros(L)
    return Model(arch, int(seed), W1, b1, W2, b2)


def _flatten_inputs(model, X):
    """Validate and flatten inputs to (n, d); centering happens in the forward pass."""
    X = np.asarray(X, dtype=np.float64)
    d = model.arch.input_dim
    expect = model.arch.input_dims
    if X.ndim == len(expect) + 1:
        if tuple(X.shape[1:]) != expect:
            raise ValueError(f"input dims {X.shape[1:]} do not match model dims {expect}")
        return X.reshape(X.shape[0], d)
    if X.ndim == 2 and X.shape[1] == d:
        return X
    raise ValueError(f"cannot feed shape {X.shape} to model with input dims {expect}")


def softmax(logits):
    """Row-wise softmax, stable under constant logit shifts."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(arch, Z):
    if arch.activation == "relu":
        return np.maximum(Z, 0.0)
    return np.tanh(Z)


def forward_batch(model, X):
    """Probabilities for a batch: (n, ...) -> (n, n_classes)."""
    Xf = _flatten_inputs(model, X) - model.arch.input_center
    A1 = _activate(model.arch, Xf @ model.W1 + model.b1)
    return softmax(A1 @ model.W2 + model.b2)


def forward(model, x):
    """Probability vector for a single image/input."""
    x = np.asarray(x, dtype=np.float64)
    return forward_batch(model, x[None])[0]


def loss_and_grads(model, X, y):
    """Mean cross-entropy over the batch and its analytic parameter gradients.

    Weight decay is applied in the optimizer step, not here, so these
    gradients are exactly the data-loss gradients (what a finite-difference
    check differentiates).
    """
    Xf = _flatten_inputs(model, X) - model.arch.input_center
    y = as_labels(y, model.arch.n_classes)
    n = Xf.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")

    Z1 = Xf @ model.W1 + model.b1
    A1 = _activate(model.arch, Z1)
    P = softmax(A1 @ model.W2 + model.b2)
    loss = -np.mean(np.log(np.maximum(P[np.arange(n), y], 1e-300)))

    dZ2 = P.copy()
    dZ2[np.arange(n), y] -= 1.0
    dZ2 /= n
    gW2 = A1.T @ dZ2
    gb2 = dZ2.sum(axis=0)
    dA1 = dZ2 @ model.W2.T
    if model.arch.activation == "relu":
        dZ1 = dA1 * (Z1 > 0)
    else:
        dZ1 = dA1 * (1.0 - A1 * A1)
    gW1 = Xf.T @ dZ1
    gb1 = dZ1.sum(axis=0)
    return loss, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def _lr_at(cfg, step, total_steps):
    if cfg.schedule == "constant":
        return cfg.learning_rate
    # Single triangular cycle: ramp to the peak at mid-training, back down,
    # floored at 5% of the peak so late steps still move.
    frac = (step + 0.5) / total_steps
    tri = 1.0 - abs(2.0 * frac - 1.0)
    return cfg.learning_rate * max(tri, 0.05)


def train(model, dataset, cfg):
    """Train a copy of the model with momentum SGD; returns the new model.

    dataset is a (X, y) pair. Batch order is reshuffled every epoch by a
    generator seeded from the model seed, so identical (seed, data, config)
    runs produce identical weights. Raises TrainingDiverged (with the epoch)
    if the running loss goes non-finite.
    """
    if not isinstance(cfg, TrainConfig):
        raise ValueError(f"expected a TrainConfig, got {type(cfg).__name__}")
    X, y = dataset
    Xf = _flatten_inputs(model, X)
    y = as_labels(y, model.arch.n_classes)
    n = Xf.shape[0]
    if n == 0:
        raise ValueError("training dataset must be nonempty")
    if y.shape[0] != n:
        raise ValueError(f"got {n} images but {y.shape[0]} labels")

    m = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(model.seed), 0x6B76]))
    vel = {k: np.zeros_like(getattr(m, k)) for k in ("W1", "b1", "W2", "b2")}
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = loss_and_grads(m, Xf[idx], y[idx])
            epoch_loss += loss * idx.size
            lr = _lr_at(cfg, step, total_steps)
            for k, g in grads.items():
                if cfg.weight_decay != 0.0 and k in ("W1", "W2"):
                    g = g + cfg.weight_decay * getattr(m, k)
                vel[k] = cfg.momentum * vel[k] + g
                getattr(m, k)[...] -= lr * vel[k]
            step += 1
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
    return m


def evaluate_accuracy(model, dataset):
    """Fraction of examples whose argmax probability matches the label."""
    X, y = dataset
    y = as_labels(y, model.arch.n_classes)
    if y.shape[0] == 0:
        raise ValueError("evaluation dataset must be nonempty")
    preds = forward_batch(model, X).argmax(axis=1)
    return float(np.mean(preds == y))


# --- checkpoints --------------------------------------------------------------


def save_model(model, path):
    """Write a version-tagged .npz checkpoint."""
    header = json.dumps(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": model.seed,
            "arch": {
                "input_dims": list(model.arch.input_dims),
                "hidden_units": model.arch.hidden_units,
                "n_classes": model.arch.n_classes,
                "activation": model.arch.activation,
                "input_center": model.arch.input_center,
            },
        }
    )
    np.savez(
        path,
        header=np.frombuffer(header.encode("utf-8"), dtype=np.uint8),
        W1=model.W1,
        b1=model.b1,
        W2=model.W2,
        b2=model.b2,
    )


def load_model(path):
    """Load a checkpoint written by save_model."""
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode("utf-8"))
            arrays = {k: data[k] for k in ("W1", "b1", "W2", "b2")}
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    arch = Architecture(
        tuple(header["arch"]["input_dims"]),
        header["arch"]["hidden_units"],
        header["arch"]["n_classes"],
        header["arch"]["activation"],
        header["arch"].get("input_center", 0.5),
    )
    model = Model(arch, int(header["seed"]), **arrays)
    if model.W1.shape != (arch.input_dim, arch.hidden_units):
        raise DataError(f"{path}: weight shapes do not match the architecture header")
    return model
