"""Keyed voting ensemble: N models, each behind its own block-shuffle key.

Member n sees block_shuffle(x, M_n, perm(K_n)). Member 1 is the frontend: its
probability vector is the only score signal exposed to callers. The final
label is the majority vote over all member argmaxes; on ties the frontend's
vote wins if it is among the tied classes, otherwise the smallest tied class
index wins.

A member may carry key=None, which pins the identity permutation; a single
such member is the unprotected baseline configuration used for comparisons.
"""

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import as_image, as_image_batch, as_labels, check_block_size
from .errors import DataError
from .keying import Permutation, SecretKey, generate_permutation
from .nn import (
    Architecture,
    TrainConfig,
    forward_batch,
    init_model,
    load_model,
    save_model,
    train,
)
from .transform import _shuffle_batch

MANIFEST_FORMAT = "keyvote-ensemble-manifest"
MANIFEST_VERSION = 1


@dataclass
class MemberSpec:
    """One ensemble member: its key, block size, cached permutation and model."""

    key: object  # SecretKey or None (identity transform)
    block_size: int
    model: object
    permutation: Permutation

    def transform_batch(self, X):
        return _shuffle_batch(X, int(self.block_size), self.permutation.zero_based())


def majority_vote(votes, n_classes, frontend_vote=None):
    """Mode of the votes with the documented tie-break.

    votes: iterable of class indices, member order (votes[0] = frontend).
    If the frontend's vote is among the tied modes it wins; otherwise the
    smallest tied class index wins.
    """
    votes = list(votes)
    if not votes:
        raise ValueError("need at least one vote")
    if frontend_vote is None:
        frontend_vote = votes[0]
    counts = np.bincount(votes, minlength=n_classes)
    top = counts.max()
    if counts[frontend_vote] == top:
        return int(frontend_vote)
    return int(counts.argmax())  # argmax takes the smallest index among ties


def _derive_member_seed(master_seed, index):
    # Stable fan-out: one SeedSequence child per member index.
    return int(np.random.SeedSequence([int(master_seed), 0x4D42, index]).generate_state(1)[0])


class KeyedVotingEnsemble(BaseEstimator, ClassifierMixin):
    """Voting ensemble of key-protected classifiers (estimator-style).

    Parameters
    ----------
    keys : list of SecretKey / hex string / None
        One key per member; member 0 is the frontend. None pins the identity
        transform. Real keys must be pairwise distinct.
    block_sizes : list of int
        Block size M_n per member; each must divide the image dimensions.
    hidden_units : int
        Hidden layer width of every member model.
    epochs, batch_size, momentum, weight_decay, learning_rate, schedule
        Member training configuration (shared by all members).
    seed : int
        Master seed; per-member training seeds are derived from it.
    """

    def __init__(
        self,
        keys=None,
        block_sizes=None,
        hidden_units=64,
        epochs=20,
        batch_size=128,
        momentum=0.9,
        weight_decay=5e-4,
        learning_rate=0.01,
        schedule="constant",
        seed=0,
    ):
        self.keys = keys
        self.block_sizes = block_sizes
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.seed = seed

    # -- construction ---------------------------------------------------------

    def _resolved_keys(self):
        if self.keys is None:
            return []
        keys = []
        for k in self.keys:
            if k is None or isinstance(k, SecretKey):
                keys.append(k)
            else:
                keys.append(SecretKey.from_hex(k))
        return keys

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            learning_rate=self.learning_rate,
            schedule=self.schedule,
        )

    @staticmethod
    def _validate_member_plan(keys, block_sizes, c, w, h):
        if not keys or not block_sizes:
            raise ValueError("need at least one member (keys and block_sizes nonempty)")
        if len(keys) != len(block_sizes):
            raise ValueError(
                f"{len(keys)} keys but {len(block_sizes)} block sizes; lengths must match"
            )
        real = [k.data for k in keys if k is not None]
        if len(set(real)) != len(real):
            raise ValueError("member keys must be pairwise distinct")
        for M in block_sizes:
            check_block_size(M, w, h)

    def fit(self, X, y):
        """Train every member on its own keyed transform of (X, y)."""
        X = as_image_batch(X)
        y = as_labels(y)
        if X.shape[0] == 0:
            raise ValueError("training set must be nonempty")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"got {X.shape[0]} images but {y.shape[0]} labels")
        n, c, w, h = X.shape
        keys = self._resolved_keys()
        self._validate_member_plan(keys, self.block_sizes, c, w, h)
        n_classes = int(y.max()) + 1 if y.size else 2
        cfg = self._train_config()
        arch = Architecture((c, w, h), self.hidden_units, n_classes)

        members = []
        for i, (key, M) in enumerate(zip(keys, self.block_sizes)):
            length = c * int(M) * int(M)
            perm = (
                Permutation.identity(length)
                if key is None
                else generate_permutation(key, length)
            )
            spec = MemberSpec(key, int(M), None, perm)
            Xn = spec.transform_batch(X)
            model = init_model(arch, _derive_member_seed(self.seed, i))
            spec.model = train(model, (Xn, y), cfg)
            members.append(spec)

        self.members_ = members
        self.n_classes_ = n_classes
        self.image_dims_ = (c, w, h)
        self.classes_ = np.arange(n_classes)
        self._query_count = 0
        self._query_lock = threading.Lock()
        return self

    @classmethod
    def from_members(cls, members, n_classes, image_dims):
        """Assemble a fitted ensemble from already-trained member specs."""
        if not members:
            raise ValueError("need at least one member")
        e = cls(
            keys=[m.key for m in members],
            block_sizes=[m.block_size for m in members],
        )
        e.members_ = list(members)
        e.n_classes_ = int(n_classes)
        e.image_dims_ = tuple(image_dims)
        e.classes_ = np.arange(int(n_classes))
        e._query_count = 0
        e._query_lock = threading.Lock()
        return e

    # -- inference --------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "members_"):
            raise ValueError("ensemble is not fitted")

    def _check_batch(self, X):
        X = as_image_batch(X, check_range=False)
        if X.shape[1:] != self.image_dims_:
            raise ValueError(
                f"image dims {X.shape[1:]} do not match ensemble dims {self.image_dims_}"
            )
        return X

    def _member_votes(self, X):
        """(N, n) array of member argmax votes."""
        votes = np.empty((len(self.members_), X.shape[0]), dtype=np.int64)
        for i, spec in enumerate(self.members_):
            P = forward_batch(spec.model, spec.transform_batch(X))
            votes[i] = P.argmax(axis=1)
        return votes

    def _vote_labels(self, votes):
        """Combine member votes columnwise with the documented tie-break."""
        N, n = votes.shape
        counts = np.zeros((n, self.n_classes_), dtype=np.int64)
        rows = np.arange(n)
        for i in range(N):
            np.add.at(counts, (rows, votes[i]), 1)
        top = counts.max(axis=1)
        best = counts.argmax(axis=1)  # smallest index among tied maxima
        frontend = votes[0]
        frontend_tops = counts[rows, frontend] == top
        return np.where(frontend_tops, frontend, best)

    def predict_proba(self, X):
        """Frontend probability vectors: the public score surface."""
        self._check_fitted()
        X = self._check_batch(X)
        spec = self.members_[0]
        return forward_batch(spec.model, spec.transform_batch(X))

    def predict(self, X):
        """Majority-voted labels."""
        self._check_fitted()
        X = self._check_batch(X)
        return self._vote_labels(self._member_votes(X))

    # -- the attack-facing oracle ------------------------------------------------

    @property
    def query_count(self):
        self._check_fitted()
        return self._query_count

    def reset_query_count(self):
        self._check_fitted()
        with self._query_lock:
            self._query_count = 0

    def oracle_batch(self, X):
        """(frontend probabilities, voted labels) for a batch; counts queries.

        One query per image. This callable is the only surface handed to
        attacks.
        """
        self._check_fitted()
        X = self._check_batch(X)
        probs = None
        votes = np.empty((len(self.members_), X.shape[0]), dtype=np.int64)
        for i, spec in enumerate(self.members_):
            P = forward_batch(spec.model, spec.transform_batch(X))
            if i == 0:
                probs = P
            votes[i] = P.argmax(axis=1)
        labels = self._vote_labels(votes)
        with self._query_lock:
            self._query_count += X.shape[0]
        return probs, labels


def build_ensemble(keys, block_sizes, dataset, cfg, seed=0):
    """Train a keyed voting ensemble; dataset is an (X, y) pair.

    Functional wrapper over KeyedVotingEnsemble for the non-estimator API.
    """
    if not isinstance(cfg, TrainConfig):
        raise ValueError(f"expected a TrainConfig, got {type(cfg).__name__}")
    X, y = dataset
    e = KeyedVotingEnsemble(
        keys=list(keys),
        block_sizes=[int(M) for M in block_sizes],
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        learning_rate=cfg.learning_rate,
        schedule=cfg.schedule,
        seed=seed,
    )
    return e.fit(X, y)


def predict_frontend(e, x):
    """Frontend probability vector for a single image."""
    return e.predict_proba(as_image(x, check_range=False)[None])[0]


def predict_label(e, x):
    """Majority-voted label for a single image."""
    return int(e.predict(as_image(x, check_range=False)[None])[0])


def oracle(e, x):
    """The deployed interface: (frontend probabilities, voted label).

    Each call counts one query on the ensemble's counter.
    """
    probs, labels = e.oracle_batch(as_image(x, check_range=False)[None])
    return probs[0], int(labels[0])


# --- manifest files -----------------------------------------------------------


def save_manifest(e, out_dir, name="ensemble"):
    """Write member checkpoints plus a JSON manifest; returns the manifest path.

    Manifest schema (version 1): format, version, n_classes, image_dims,
    members: [{key_hex|null, key_label, block_size, seed, checkpoint}].
    Checkpoint paths are relative to the manifest's directory.
    """
    e._check_fitted()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for i, spec in enumerate(e.members_):
        ckpt = f"{name}_member{i}.npz"
        save_model(spec.model, out_dir / ckpt)
        members.append(
            {
                "key_hex": None if spec.key is None else spec.key.hex,
                "key_label": "" if spec.key is None else spec.key.label,
                "block_size": spec.block_size,
                "seed": spec.model.seed,
                "checkpoint": ckpt,
            }
        )
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "n_classes": e.n_classes_,
        "image_dims": list(e.image_dims_),
        "members": members,
    }
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(path):
    """Load a manifest written by save_manifest into a fitted ensemble."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    c, w, h = manifest["image_dims"]
    members = []
    for entry in manifest["members"]:
        key_hex = entry.get("key_hex")
        key = (
            None
            if key_hex is None
            else SecretKey.from_hex(key_hex, label=entry.get("key_label", ""))
        )
        M = int(entry["block_size"])
        check_block_size(M, w, h)
        length = c * M * M
        perm = Permutation.identity(length) if key is None else generate_permutation(key, length)
        model = load_model(path.parent / entry["checkpoint"])
        if tuple(model.arch.input_dims) != (c, w, h):
            raise DataError(
                f"member checkpoint dims {model.arch.input_dims} do not match manifest dims {(c, w, h)}"
            )
        members.append(MemberSpec(key, M, model, perm))
    return KeyedVotingEnsemble.from_members(members, manifest["n_classes"], (c, w, h))
