"""Block-wise keyed pixel shuffling of image tensors.

An image of shape (c, w, h) is divided into (w/M) x (h/M) blocks of shape
(c, M, M). Each block is flattened channel-major, then by row, then by column
(C order of the (c, M, M) sub-tensor), every flattened block is rearranged by
the same keyed permutation v via out[k] = block[v[k]], and the blocks are
reassembled in place. The flattening order is fixed; the same order is used
for the forward and inverse transform and by the golden-vector files, so
shuffled datasets are portable across platforms.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_image, as_image_batch, check_block_size
from .errors import DataError
from .keying import Permutation, SecretKey, generate_permutation, invert_permutation


@dataclass
class BlockGrid:
    """An image partitioned into flattened blocks; grid shape (w/M, h/M, c*M*M)."""

    blocks: np.ndarray
    channels: int
    width: int
    height: int
    block_size: int

    def assemble(self):
        """Reassemble the original image from the (unmodified) blocks."""
        c, M = self.channels, self.block_size
        gw, gh = self.width // M, self.height // M
        return (
            self.blocks.reshape(gw, gh, c, M, M)
            .transpose(2, 0, 3, 1, 4)
            .reshape(c, self.width, self.height)
        )


def partition_blocks(x, block_size):
    """Divide an image into flattened blocks of c*M*M values each."""
    x = as_image(x)
    c, w, h = x.shape
    check_block_size(block_size, w, h)
    M = int(block_size)
    gw, gh = w // M, h // M
    blocks = (
        x.reshape(c, gw, M, gh, M).transpose(1, 3, 0, 2, 4).reshape(gw, gh, c * M * M)
    )
    return BlockGrid(blocks, c, w, h, M)


def _shuffle_batch(X, block_size, perm0):
    """Rearrange every block of every image by the 0-based index array perm0.

    Fast path shared by the public API and the ensemble forward pass; assumes
    X is a validated (n, c, w, h) array and perm0 has length c*M*M.
    """
    n, c, w, h = X.shape
    M = block_size
    gw, gh = w // M, h // M
    blocks = X.reshape(n, c, gw, M, gh, M).transpose(0, 2, 4, 1, 3, 5)
    blocks = blocks.reshape(n, gw, gh, c * M * M)[..., perm0]
    return (
        blocks.reshape(n, gw, gh, c, M, M)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(n, c, w, h)
    )


def _check_perm(p, c, block_size):
    if not isinstance(p, Permutation):
        raise ValueError(f"expected a Permutation, got {type(p).__name__}")
    expect = c * block_size * block_size
    if len(p) != expect:
        raise ValueError(
            f"permutation length {len(p)} does not match c*M*M = {expect} "
            f"(c={c}, M={block_size})"
        )


def block_shuffle(x, block_size, p):
    """Shuffle each block of x by the permutation p: out[k] = block[v[k]]."""
    x = as_image(x)
    c, w, h = x.shape
    check_block_size(block_size, w, h)
    _check_perm(p, c, block_size)
    return _shuffle_batch(x[None], int(block_size), p.zero_based())[0]


def inverse_block_shuffle(x, block_size, p):
    """Undo block_shuffle with the same permutation; exact round-trip."""
    x = as_image(x)
    c, w, h = x.shape
    check_block_size(block_size, w, h)
    _check_perm(p, c, block_size)
    return _shuffle_batch(x[None], int(block_size), invert_permutation(p).zero_based())[0]


def transform_dataset(dataset, block_size, key):
    """Shuffle every image of a labeled dataset with one keyed permutation.

    dataset is a sequence of (image, label) pairs; all images must share
    dimensions. Labels and ordering are preserved.
    """
    pairs = list(dataset)
    if not pairs:
        return []
    x0 = as_image(pairs[0][0])
    c, w, h = x0.shape
    check_block_size(block_size, w, h)
    p = generate_permutation(key, c * block_size * block_size)
    perm0 = p.zero_based()
    out = []
    for img, label in pairs:
        img = as_image(img)
        if img.shape != (c, w, h):
            raise ValueError(
                f"all images must share dimensions; got {img.shape} vs {(c, w, h)}"
            )
        out.append((_shuffle_batch(img[None], int(block_size), perm0)[0], label))
    return out


class BlockShuffler(BaseEstimator, TransformerMixin):
    """Keyed block-wise pixel shuffle as an estimator-style transformer.

    Parameters
    ----------
    key : SecretKey, hex string, or None
        Key the permutation is derived from. None means the identity
        transform (used for unprotected baselines).
    block_size : int
        Side length M of the square blocks; must divide image width/height.
    """

    def __init__(self, key=None, block_size=2):
        self.key = key
        self.block_size = block_size

    def _resolved_key(self):
        if self.key is None or isinstance(self.key, SecretKey):
            return self.key
        return SecretKey.from_hex(self.key)

    def fit(self, X, y=None):
        X = as_image_batch(X)
        if X.shape[0] == 0:
            raise ValueError("cannot fit on an empty batch (image dims unknown)")
        n, c, w, h = X.shape
        check_block_size(self.block_size, w, h)
        length = c * self.block_size * self.block_size
        key = self._resolved_key()
        if key is None:
            self.permutation_ = Permutation.identity(length)
        else:
            self.permutation_ = generate_permutation(key, length)
        self.image_dims_ = (c, w, h)
        return self

    def _check_fitted(self, X):
        if not hasattr(self, "permutation_"):
            raise ValueError("BlockShuffler must be fitted before transforming")
        X = as_image_batch(X)
        if X.shape[1:] != self.image_dims_:
            raise ValueError(
                f"image dims {X.shape[1:]} do not match fitted dims {self.image_dims_}"
            )
        return X

    def transform(self, X):
        X = self._check_fitted(X)
        return _shuffle_batch(X, int(self.block_size), self.permutation_.zero_based())

    def inverse_transform(self, X):
        X = self._check_fitted(X)
        inv0 = invert_permutation(self.permutation_).zero_based()
        return _shuffle_batch(X, int(self.block_size), inv0)


# --- golden-vector conformance files -----------------------------------------
#
# Text format, one record per [vector] section:
#
#     # comments and blank lines are ignored
#     [vector]
#     dims = c w h
#     key = <hex string>            (omitted for identity-permutation vectors)
#     block_size = M
#     input = v0 v1 ... v{c*w*h-1}  (C-order flattening of the (c, w, h) tensor)
#     output = ...                  (expected block_shuffle result, same layout)


def load_golden_vectors(path):
    """Parse a golden-vector file into a list of dict records."""
    records = []
    current = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[vector]":
                current = {}
                records.append(current)
                continue
            if current is None or "=" not in line:
                raise DataError(f"{path}:{lineno}: unexpected line {line!r}")
            field, _, value = line.partition("=")
            field, value = field.strip(), value.strip()
            if field == "dims":
                current["dims"] = tuple(int(t) for t in value.split())
            elif field == "key":
                current["key"] = value
            elif field == "block_size":
                current["block_size"] = int(value)
            elif field in ("input", "output"):
                current[field] = np.array([float(t) for t in value.split()])
            else:
                raise DataError(f"{path}:{lineno}: unknown field {field!r}")
    for i, rec in enumerate(records):
        missing = {"dims", "block_size", "input", "output"} - set(rec)
        if missing:
            raise DataError(f"{path}: vector {i} missing fields {sorted(missing)}")
    return records


def check_golden_vector(record):
    """Apply block_shuffle per the record; return (expected, actual) arrays."""
    c, w, h = record["dims"]
    x = record["input"].reshape(c, w, h)
    M = record["block_size"]
    if "key" in record:
        key = SecretKey.from_hex(record["key"])
        p = generate_permutation(key, c * M * M)
    else:
        p = Permutation.identity(c * M * M)
    actual = block_shuffle(x, M, p).reshape(-1)
    return record["output"], actual
