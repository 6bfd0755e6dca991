"""Dataset ingestion, ACC/ASR metrics, experiment configs and reports.

Desk-scale runs default to a built-in synthetic image set: every class shares
one global palette of pixel values arranged in a class-specific random layout,
so classes are separable only by spatial arrangement (never by value
statistics), which is what makes the keyed shuffle load-bearing. File-backed
datasets come in three formats: csv (lossless text), idx (ubyte tensors) and
cifar-binary (label byte + 3072 pixel bytes per record).
"""

import csv
import hashlib
import io
import json
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_image_batch, as_labels
from .attacks import (
    ATTACK_KINDS,
    AttackBudget,
    DEFAULT_EPSILON,
    NattackParams,
    SpsaParams,
    SquareParams,
    run_attack_suite,
)
from .ensemble import KeyedVotingEnsemble
from .errors import DataError
from .keying import SecretKey
from .nn import TrainConfig

DATA_DIR_ENV = "KEYVOTE_DATA_DIR"
DATASET_FORMATS = ("cifar-binary", "idx", "csv")

# Defaults of the synthetic desk-scale task (calibrated once, then frozen).
SYNTH_DIMS = (3, 16, 16)
SYNTH_SIGNAL = 0.08
SYNTH_NOISE = 0.04


@dataclass
class LabeledDataset:
    """Images (n, c, w, h) in [0, 1] with integer labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""
    n_classes: int = None

    def __post_init__(self):
        self.images = as_image_batch(self.images)
        self.labels = as_labels(self.labels, self.n_classes)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return self.images.shape[0]

    @property
    def dims(self):
        return tuple(self.images.shape[1:])

    def as_pairs(self):
        return list(zip(self.images, self.labels))

    def subset(self, indices, split=None):
        return LabeledDataset(
            self.images[indices],
            self.labels[indices],
            split or self.split,
            self.n_classes,
        )


def derive_seed(master, tag, index=0):
    """Stable child seed: documented fan-out from the master experiment seed."""
    digest = hashlib.sha256(
        b"keyvote.seed." + tag.encode() + int(master).to_bytes(8, "big", signed=True)
        + int(index).to_bytes(8, "big", signed=True)
    ).digest()
    return int.from_bytes(digest[:8], "big")


# --- synthetic desk-scale data -------------------------------------------------


def make_synthetic_dataset(
    n_train,
    n_test,
    n_classes=10,
    dims=SYNTH_DIMS,
    signal=SYNTH_SIGNAL,
    noise=SYNTH_NOISE,
    seed=0,
):
    """Generate the desk-scale classification task; returns (train, test).

    Class k's template arranges one shared value palette in a k-specific
    random spatial layout, scaled by `signal` around mid-gray; samples add
    i.i.d. Gaussian pixel noise and clip to [0, 1].
    """
    c, w, h = dims
    d = c * w * h
    rng = np.random.default_rng(seed)
    palette = np.linspace(0.0, 1.0, d)
    templates = np.empty((n_classes, d))
    for k in range(n_classes):
        templates[k] = 0.5 + signal * (palette[rng.permutation(d)] - 0.5)
    templates = templates.reshape(n_classes, c, w, h)

    def sample(n, split):
        labels = np.arange(n) % n_classes
        rng.shuffle(labels)
        images = templates[labels] + noise * rng.standard_normal((n, c, w, h))
        np.clip(images, 0.0, 1.0, out=images)
        return LabeledDataset(images, labels, split, n_classes)

    return sample(n_train, "train"), sample(n_test, "test")


# --- file formats ---------------------------------------------------------------


def _resolve_path(path):
    base = os.environ.get(DATA_DIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def load_dataset(path, fmt, labels_path=None, split=""):
    """Load a labeled dataset; fmt is one of DATASET_FORMATS.

    Relative paths resolve against $KEYVOTE_DATA_DIR when it is set. The idx
    format needs a companion labels file (derived by replacing 'images' with
    'labels' in the filename when labels_path is not given).
    """
    if fmt not in DATASET_FORMATS:
        raise DataError(f"unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")
    path = _resolve_path(path)
    if fmt == "cifar-binary":
        return _load_cifar_binary(path, split)
    if fmt == "idx":
        return _load_idx(path, labels_path, split)
    return _load_csv(path, split)


def save_dataset(ds, path, fmt, labels_path=None):
    """Write a dataset in the given format (byte formats quantize to uint8)."""
    if fmt not in DATASET_FORMATS:
        raise DataError(f"unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")
    path = _resolve_path(path)
    if fmt == "cifar-binary":
        _save_cifar_binary(ds, path)
    elif fmt == "idx":
        _save_idx(ds, path, labels_path)
    else:
        _save_csv(ds, path)


def _load_cifar_binary(path, split):
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    record = 1 + 3 * 32 * 32
    n, rem = divmod(len(raw), record)
    if rem:
        raise DataError(
            f"{path}: truncated cifar-binary file, {rem} trailing bytes at offset {n * record}"
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = buf[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{path}: label {labels.max()} out of range for cifar-binary (0..9)")
    images = buf[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, split, n_classes=10)


def _save_cifar_binary(ds, path):
    if ds.dims != (3, 32, 32):
        raise DataError(f"cifar-binary requires dims (3, 32, 32), dataset has {ds.dims}")
    if ds.labels.size and ds.labels.max() > 9:
        raise DataError("cifar-binary labels must lie in 0..9")
    quant = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    with open(path, "wb") as fh:
        for lbl, row in zip(ds.labels, quant):
            fh.write(bytes([int(lbl)]))
            fh.write(row.tobytes())


_IDX_UBYTE = 0x08


def _read_idx_array(path):
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"{path}: truncated idx header at offset {len(raw)}")
    if raw[0] or raw[1] or raw[2] != _IDX_UBYTE:
        raise DataError(f"{path}: bad idx magic {raw[:4].hex()} (only ubyte idx supported)")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated idx dimension table at offset {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    expect = int(np.prod(dims)) if dims else 0
    if len(raw) != header + expect:
        raise DataError(
            f"{path}: idx payload has {len(raw) - header} bytes at offset {header}, expected {expect}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _load_idx(path, labels_path, split):
    if labels_path is None:
        guess = path.replace("images", "labels")
        if guess == path:
            raise DataError(
                f"idx format needs a labels file; pass labels_path or name {path} with 'images'"
            )
        labels_path = guess
    else:
        labels_path = _resolve_path(labels_path)
    arr = _read_idx_array(path)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    elif arr.ndim != 4:
        raise DataError(f"{path}: idx images must be 3-d or 4-d, got {arr.ndim}-d")
    labels = _read_idx_array(labels_path)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: idx labels must be 1-d, got {labels.ndim}-d")
    return LabeledDataset(arr.astype(np.float64) / 255.0, labels.astype(np.int64), split)


def _write_idx_array(arr, path):
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_UBYTE, arr.ndim]))
        for d in arr.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(arr.astype(np.uint8).tobytes())


def _save_idx(ds, path, labels_path):
    if labels_path is None:
        labels_path = path.replace("images", "labels")
        if labels_path == path:
            raise DataError("idx format needs a labels path (or 'images' in the filename)")
    _write_idx_array(np.rint(ds.images * 255.0).astype(np.uint8), path)
    _write_idx_array(ds.labels.astype(np.uint8), labels_path)


def _load_csv(path, split):
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    dims = None
    n_classes = None
    rows = []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("dims="):
                dims = tuple(int(t) for t in body[len("dims=") :].split(","))
            elif body.startswith("classes="):
                n_classes = int(body[len("classes=") :])
            continue
        if not header_seen:
            header_seen = True  # header row: label,v0,v1,...
            continue
        parts = line.split(",")
        try:
            rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: malformed csv row: {exc}") from exc
    if not rows:
        warnings.warn(f"{path}: empty csv dataset")
        shape = (0,) + (dims if dims else (0, 0, 0))
        return LabeledDataset(np.zeros(shape), np.zeros(0, dtype=np.int64), split, n_classes)
    if dims is None:
        raise DataError(f"{path}: csv dataset is missing the '# dims=c,w,h' comment")
    d = int(np.prod(dims))
    labels = np.array([r[0] for r in rows], dtype=np.int64)
    flat = np.array([r[1] for r in rows], dtype=np.float64)
    if flat.shape[1] != d:
        raise DataError(
            f"{path}: rows carry {flat.shape[1]} values but dims {dims} imply {d}"
        )
    return LabeledDataset(flat.reshape((-1,) + dims), labels, split, n_classes)


def _save_csv(ds, path):
    c, w, h = ds.dims if len(ds) else (0, 0, 0)
    d = c * w * h
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# dims={c},{w},{h}\n")
        if ds.n_classes:
            fh.write(f"# classes={ds.n_classes}\n")
        header = ["label"] + [f"v{i}" for i in range(d)]
        fh.write(",".join(header) + "\n")
        for img, lbl in zip(ds.images.reshape(len(ds), -1), ds.labels):
            fh.write(str(int(lbl)) + "," + ",".join(repr(float(v)) for v in img) + "\n")


# --- metrics ---------------------------------------------------------------------


def compute_clean_acc(e, test):
    """Voted-label accuracy over the whole dataset."""
    if len(test) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    preds = e.predict(test.images)
    return float(np.mean(preds == test.labels))


def sample_correctly_classified(e, ds, size, seed):
    """Uniformly sample indices of correctly classified images."""
    if size < 1:
        raise ValueError("sample size must be >= 1")
    preds = e.predict(ds.images)
    correct = np.nonzero(preds == ds.labels)[0]
    if correct.size < size:
        raise ValueError(
            f"only {correct.size} correctly classified images available, need {size} "
            f"(short by {size - correct.size})"
        )
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(correct, size=size, replace=False))


def run_sampled_attack(e, ds, kind, budget, sample_size, seed, params=None, indices=None):
    """Sample correctly-classified images (or use `indices`) and attack them.

    Returns (indices, outcomes). Seeds for sampling and for the attack suite
    are both derived from `seed`.
    """
    if indices is None:
        indices = sample_correctly_classified(
            e, ds, sample_size, derive_seed(seed, "asr-sample")
        )
    sub = ds.subset(indices)
    outcomes = run_attack_suite(
        e, (sub.images, sub.labels), kind, budget, params=params,
        seed=derive_seed(seed, f"attack-{kind}"),
    )
    return indices, outcomes


def compute_asr(e, test, kind, budget, sample_size, seed, params=None):
    """Attack success rate over sampled correctly-classified images."""
    _, outcomes = run_sampled_attack(e, test, kind, budget, sample_size, seed, params)
    return float(np.mean([o.success for o in outcomes]))


def run_attack_on_dataset(e, ds, kind, budget, seed=0, param_overrides=None):
    """Attack every image of a dataset (the CLI path); no correctness sampling.

    Returns (indices, outcomes, clean_labels) where clean_labels are the voted
    predictions on the unperturbed images.
    """
    if len(ds) == 0:
        raise DataError("dataset is empty; nothing to attack")
    if kind not in _ATTACK_PARAM_TYPES:
        raise DataError(f"unknown attack kind {kind!r}")
    params = _ATTACK_PARAM_TYPES[kind](**(param_overrides or {}))
    clean = e.predict(ds.images)
    outcomes = run_attack_suite(
        e, (ds.images, ds.labels), kind, budget, params=params,
        seed=derive_seed(seed, f"attack-{kind}"),
    )
    return np.arange(len(ds)), outcomes, clean


def outcomes_to_csv(fh, ds, indices, outcomes, clean_labels):
    """Write one AttackOutcome row per image: the attack CSV schema."""
    writer = csv.writer(fh)
    writer.writerow(
        ["image_id", "true_label", "clean_label", "success", "queries", "linf_distance"]
    )
    for idx, out, clean in zip(indices, outcomes, clean_labels):
        writer.writerow(
            [
                int(idx),
                int(ds.labels[idx]),
                int(clean),
                int(out.success),
                out.queries,
                repr(out.linf_distance),
            ]
        )


# --- experiment configuration ------------------------------------------------------


_ATTACK_PARAM_TYPES = {"spsa": SpsaParams, "nattack": NattackParams, "square": SquareParams}


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs; parsed from the key-value config format."""

    label: str = "experiment"
    dataset_kind: str = "synthetic"
    train_path: str = None
    test_path: str = None
    train_labels: str = None
    test_labels: str = None
    n_train: int = 1500
    n_test: int = 400
    n_classes: int = 10
    dims: tuple = SYNTH_DIMS
    signal: float = SYNTH_SIGNAL
    noise: float = SYNTH_NOISE
    n_members: int = 9
    keys: object = "auto"  # "auto" | list of hex strings | [None] for baseline
    block_sizes: object = "mixed"  # "mixed" | list of ints
    hidden_units: int = 48
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=25, batch_size=64))
    attacks: tuple = ()
    epsilon: float = DEFAULT_EPSILON
    attack_params: dict = field(default_factory=dict)
    asr_sample_size: int = 100
    seed: int = 0

    def resolved_keys(self):
        """The member key list.

        'auto' derives n_members distinct keys from the seed; 'none' (or a
        None entry) pins the identity transform, the undefended baseline.
        """
        if self.keys == "auto":
            keys = []
            for i in range(self.n_members):
                material = hashlib.sha256(
                    b"keyvote.autokey" + int(self.seed).to_bytes(8, "big", signed=True)
                    + i.to_bytes(8, "big")
                ).digest()[:16]
                keys.append(SecretKey(material, label=f"K{i + 1}"))
            return keys
        if self.keys == "none":
            return [None] * self.n_members
        keys = []
        for i, k in enumerate(self.keys):
            if k is None or (isinstance(k, str) and k.lower() == "none"):
                keys.append(None)
            else:
                keys.append(SecretKey.from_hex(k, label=f"K{i + 1}"))
        hexes = [k.hex for k in keys if k is not None]
        if len(set(hexes)) != len(hexes):
            warnings.warn("duplicate member keys in config; the build will reject them")
        return keys

    def resolved_block_sizes(self, dims):
        """'mixed' puts the largest common divisor up front and 2 elsewhere."""
        if self.block_sizes == "mixed":
            _, w, h = dims
            m1 = int(np.gcd(w, h))
            if self.n_members == 1:
                return [m1]
            return [m1] + [2] * (self.n_members - 1)
        return [int(M) for M in self.block_sizes]

    def attack_budget_and_params(self, kind):
        """Split the config's per-attack overrides into (budget, params)."""
        overrides = dict(self.attack_params.get(kind, {}))
        budget = AttackBudget(epsilon=self.epsilon, max_queries=overrides.pop("max_queries", None))
        return budget, _ATTACK_PARAM_TYPES[kind](**overrides)


def parse_config_text(text, source="<config>"):
    """Parse the 'key = value' config format into a flat mapping."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def load_config(path, overrides=()):
    """Read a config file, apply 'key=value' overrides, build an ExperimentConfig."""
    try:
        text = open(_resolve_path(path), "r", encoding="utf-8").read()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    mapping = parse_config_text(text, source=str(path))
    for item in overrides:
        if "=" not in item:
            raise DataError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping)


def _parse_list(value):
    return [t.strip() for t in value.split(",") if t.strip()]


def config_from_mapping(mapping):
    """Build an ExperimentConfig from a flat dotted-key mapping."""
    mapping = dict(mapping)
    cfg = {}
    train_kw = {}
    attack_params = {}

    def pop(key, default=None):
        return mapping.pop(key, default)

    cfg["label"] = pop("report.label", "experiment")
    cfg["dataset_kind"] = pop("dataset.kind", "synthetic")
    if cfg["dataset_kind"] not in ("synthetic",) + DATASET_FORMATS:
        raise DataError(f"dataset.kind must be synthetic or one of {DATASET_FORMATS}")
    for name in ("train_path", "test_path", "train_labels", "test_labels"):
        val = pop("dataset." + name)
        if val is not None:
            cfg[name] = val
    for name, conv in (
        ("n_train", int), ("n_test", int), ("n_classes", int),
        ("signal", float), ("noise", float),
    ):
        val = pop("dataset." + name)
        if val is not None:
            cfg[name] = conv(val)
    dims = pop("dataset.dims")
    if dims is not None:
        cfg["dims"] = tuple(int(t) for t in dims.replace(",", " ").split())

    cfg["n_members"] = int(pop("ensemble.n_members", 9))
    keys = pop("ensemble.keys", "auto")
    cfg["keys"] = keys if keys in ("auto", "none") else _parse_list(keys)
    blocks = pop("ensemble.block_sizes", "mixed")
    cfg["block_sizes"] = "mixed" if blocks == "mixed" else [int(t) for t in _parse_list(blocks)]
    cfg["hidden_units"] = int(pop("ensemble.hidden_units", 48))

    for name, conv in (
        ("epochs", int), ("batch_size", int), ("momentum", float),
        ("weight_decay", float), ("learning_rate", float), ("schedule", str),
    ):
        val = pop("train." + name)
        if val is not None:
            train_kw[name] = conv(val)
    train_kw.setdefault("epochs", 25)
    train_kw.setdefault("batch_size", 64)
    try:
        cfg["train"] = TrainConfig(**train_kw)
    except ValueError as exc:
        raise DataError(f"invalid train config: {exc}") from exc

    attacks = _parse_list(pop("eval.attacks", ""))
    for kind in attacks:
        if kind not in ATTACK_KINDS:
            raise DataError(f"unknown attack {kind!r} in eval.attacks")
    cfg["attacks"] = tuple(attacks)
    cfg["epsilon"] = float(pop("eval.epsilon", DEFAULT_EPSILON))
    cfg["asr_sample_size"] = int(pop("eval.asr_sample_size", 100))
    cfg["seed"] = int(pop("seed", 0))

    for key in list(mapping):
        if key.startswith("attack."):
            _, kind, pname = key.split(".", 2)
            if kind not in _ATTACK_PARAM_TYPES:
                raise DataError(f"unknown attack {kind!r} in {key}")
            raw = mapping.pop(key)
            conv = float if "." in raw or "e" in raw.lower() else int
            attack_params.setdefault(kind, {})[pname] = conv(raw)
    cfg["attack_params"] = attack_params

    if mapping:
        raise DataError(f"unknown config keys: {sorted(mapping)}")
    try:
        return ExperimentConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid config: {exc}") from exc


# --- experiment runner ----------------------------------------------------------------


class ExperimentError(RuntimeError):
    """A module error annotated with the experiment stage it escaped from."""

    def __init__(self, stage, original):
        self.stage = stage
        self.original = original
        super().__init__(f"experiment stage '{stage}' failed: {original}")


@contextmanager
def _stage(name):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


@dataclass
class MetricsReport:
    """Clean ACC plus per-attack ASR and ACC-under-attack for one configuration."""

    label: str
    clean_acc: float
    asr: dict = field(default_factory=dict)
    acc_under_attack: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def body_dict(self):
        """Deterministic part of the report (everything but runtime metadata)."""
        return {
            "label": self.label,
            "clean_acc": self.clean_acc,
            "asr": dict(self.asr),
            "acc_under_attack": dict(self.acc_under_attack),
            "config": dict(self.config),
        }


def load_experiment_data(cfg):
    """Materialize (train, test) datasets for a config."""
    if cfg.dataset_kind == "synthetic":
        return make_synthetic_dataset(
            cfg.n_train, cfg.n_test, cfg.n_classes, cfg.dims, cfg.signal, cfg.noise,
            seed=derive_seed(cfg.seed, "data"),
        )
    if not cfg.train_path or not cfg.test_path:
        raise DataError("file-backed datasets need dataset.train_path and dataset.test_path")
    train = load_dataset(cfg.train_path, cfg.dataset_kind, cfg.train_labels, split="train")
    test = load_dataset(cfg.test_path, cfg.dataset_kind, cfg.test_labels, split="test")
    return train, test


def build_experiment_ensemble(cfg, train):
    keys = cfg.resolved_keys()
    block_sizes = cfg.resolved_block_sizes(train.dims)
    e = KeyedVotingEnsemble(
        keys=keys,
        block_sizes=block_sizes,
        hidden_units=cfg.hidden_units,
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        learning_rate=cfg.train.learning_rate,
        schedule=cfg.train.schedule,
        seed=derive_seed(cfg.seed, "members"),
    )
    return e.fit(train.images, train.labels)


def run_experiment(cfg, ensemble=None, datasets=None):
    """Train (or reuse) the ensemble, measure clean ACC and each configured ASR.

    Deterministic given the config (including its seed); runtime metadata goes
    to report.meta, never into the body.
    """
    t0 = time.time()
    with _stage("load-data"):
        train, test = datasets if datasets is not None else load_experiment_data(cfg)
    with _stage("build-ensemble"):
        e = ensemble if ensemble is not None else build_experiment_ensemble(cfg, train)
    with _stage("clean-accuracy"):
        clean = compute_clean_acc(e, test)
    asr = {}
    acc_atk = {}
    for kind in cfg.attacks:
        with _stage(f"attack-{kind}"):
            budget, params = cfg.attack_budget_and_params(kind)
            indices, outcomes = run_sampled_attack(
                e, test, kind, budget, cfg.asr_sample_size, cfg.seed, params
            )
            asr[kind] = float(np.mean([o.success for o in outcomes]))
            adv = np.stack([o.x_adv for o in outcomes])
            preds = e.predict(adv)
            acc_atk[kind] = float(np.mean(preds == test.labels[indices]))
    echo = {
        "dataset_kind": cfg.dataset_kind,
        "n_members": cfg.n_members,
        "block_sizes": list(cfg.resolved_block_sizes(test.dims)),
        "hidden_units": cfg.hidden_units,
        "epochs": cfg.train.epochs,
        "epsilon": cfg.epsilon,
        "asr_sample_size": cfg.asr_sample_size,
        "seed": cfg.seed,
        "attacks": list(cfg.attacks),
    }
    meta = {"runtime_seconds": time.time() - t0, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
    return MetricsReport(cfg.label, clean, asr, acc_atk, echo, meta)


# --- report rendering -------------------------------------------------------------------


_CANON_ORDER = ("spsa", "nattack", "square")


def _attack_columns(reports):
    kinds = []
    for kind in _CANON_ORDER:
        if any(kind in r.asr for r in reports):
            kinds.append(kind)
    for r in reports:  # any non-canonical kinds, in first-seen order
        for kind in r.asr:
            if kind not in kinds:
                kinds.append(kind)
    return kinds


def render_report(reports, fmt="text-table"):
    """Render one report or a list of reports; one table row per configuration.

    text-table shows percentages to 2 decimal places; csv and json-like carry
    full precision and round-trip losslessly.
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    if fmt == "json-like":
        return report_to_json(reports)
    kinds = _attack_columns(reports)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["label", "clean_acc"]
            + [f"asr_{k}" for k in kinds]
            + [f"acc_under_{k}" for k in kinds]
        )
        for r in reports:
            writer.writerow(
                [r.label, repr(r.clean_acc)]
                + [repr(r.asr[k]) if k in r.asr else "" for k in kinds]
                + [repr(r.acc_under_attack[k]) if k in r.acc_under_attack else "" for k in kinds]
            )
        return buf.getvalue()
    if fmt != "text-table":
        raise ValueError(f"unknown report format {fmt!r}")

    def pct(v):
        return f"{100.0 * v:.2f}"

    headers = ["Model", "Clean ACC (%)"] + [f"{k.upper()} ASR (%)" for k in kinds]
    rows = [
        [r.label, pct(r.clean_acc)] + [pct(r.asr[k]) if k in r.asr else "-" for k in kinds]
        for r in reports
    ]
    if any(r.acc_under_attack for r in reports):
        headers += [f"{k.upper()} ACC (%)" for k in kinds]
        for r, row in zip(reports, rows):
            row += [
                pct(r.acc_under_attack[k]) if k in r.acc_under_attack else "-" for k in kinds
            ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "-+-".join("-" * w for w in widths),
    ]
    lines += [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def report_to_json(reports):
    """Machine rendering: full precision, includes runtime metadata."""
    single = isinstance(reports, MetricsReport)
    if single:
        reports = [reports]
    payload = [
        {**r.body_dict(), "meta": dict(r.meta)} for r in reports
    ]
    return json.dumps(payload[0] if single else payload, indent=2, sort_keys=True) + "\n"


def report_from_json(text):
    """Inverse of report_to_json; returns a MetricsReport or a list of them."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid report json: {exc}") from exc

    def build(d):
        try:
            return MetricsReport(
                d["label"], d["clean_acc"], dict(d["asr"]),
                dict(d["acc_under_attack"]), dict(d["config"]), dict(d.get("meta", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"report json missing field: {exc}") from exc

    if isinstance(payload, list):
        return [build(d) for d in payload]
    return build(payload)
