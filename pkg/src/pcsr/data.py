"""Synthetic paired dataset: generation, noise injection, container IO,
splits, and batch iteration.

Container layout (all integers little-endian):

    8 bytes   magic ``PCSRDS1\\n``
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header (schema, counts, dims, generator params)
    blocks    image_feats <f8, text_feats <f8,
              pair_of <i8, true_of <i8, latent_class <i8

Plain CSV feature matrices (one row per sample) are accepted through
``load_features_csv`` / ``dataset_from_features`` for externally produced
features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, FormatError
from .numerics import make_rng

_MAGIC = b"PCSRDS1\n"
_SCHEMA = 1


@dataclass
class PairDataset:
    """Image/text feature pairs with assigned and ground-truth correspondence.

    ``pair_of[i]`` is the caption index sample i trains against; ``true_of[i]``
    is the caption it actually belongs to. They differ exactly on corrupted
    pairs. ``latent_class`` is the generator's class id (-1 when unknown).
    """

    image_feats: np.ndarray
    text_feats: np.ndarray
    pair_of: np.ndarray
    true_of: np.ndarray
    latent_class: np.ndarray
    captions_per_image: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_feats = np.ascontiguousarray(self.image_feats, dtype=np.float64)
        self.text_feats = np.ascontiguousarray(self.text_feats, dtype=np.float64)
        self.pair_of = np.ascontiguousarray(self.pair_of, dtype=np.int64)
        self.true_of = np.ascontiguousarray(self.true_of, dtype=np.int64)
        self.latent_class = np.ascontiguousarray(self.latent_class, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.n_images
        if n == 0:
            raise DegenerateInputError("empty dataset")
        if self.image_feats.ndim != 2 or self.text_feats.ndim != 2:
            raise ConfigurationError("feature arrays must be 2-D")
        for name, arr in (("pair_of", self.pair_of), ("true_of", self.true_of),
                          ("latent_class", self.latent_class)):
            if arr.shape != (n,):
                raise ConfigurationError(f"{name} must have shape ({n},)")
        if self.captions_per_image < 1:
            raise ConfigurationError("captions_per_image must be >= 1")
        for name, arr in (("pair_of", self.pair_of), ("true_of", self.true_of)):
            if arr.min() < 0 or arr.max() >= self.n_texts:
                raise ConfigurationError(f"{name} contains out-of-range text indices")
        if not np.isfinite(self.image_feats).all() or not np.isfinite(self.text_feats).all():
            raise ConfigurationError("features must be finite")

    @property
    def n_images(self) -> int:
        return self.image_feats.shape[0]

    @property
    def n_texts(self) -> int:
        return self.text_feats.shape[0]

    @property
    def d_img(self) -> int:
        return self.image_feats.shape[1]

    @property
    def d_txt(self) -> int:
        return self.text_feats.shape[1]

    @property
    def corruption_mask(self) -> np.ndarray:
        """Boolean mask over images: True where the assigned caption is wrong."""
        return self.pair_of != self.true_of

    def caption_indices(self, i: int) -> np.ndarray:
        """All ground-truth caption indices of image ``i``."""
        c = self.captions_per_image
        if c == 1:
            return self.true_of[i:i + 1].copy()
        base = i * c
        return np.arange(base, base + c, dtype=np.int64)

    def image_of_caption(self, j: int) -> int:
        """Owning image of caption ``j``."""
        c = self.captions_per_image
        if c > 1:
            return j // c
        if not hasattr(self, "_owner"):
            owner = np.full(self.n_texts, -1, dtype=np.int64)
            owner[self.true_of] = np.arange(self.n_images)
            self._owner = owner
        img = int(self._owner[j])
        if img < 0:
            raise ConfigurationError(f"caption {j} has no owning image")
        return img


def generate_synthetic(n_pairs: int, n_classes: int, d_img: int = 64, d_txt: int = 64,
                       intra_class_noise: float = 0.3, seed: int = 0,
                       captions_per_image: int = 1) -> PairDataset:
    """Latent-class paired features: each class gets independent random image
    and text prototypes, each sample draws a class and jitters both sides."""
    if n_pairs < 1 or n_classes < 1 or n_pairs < n_classes:
        raise ConfigurationError(
            f"need n_pairs >= n_classes >= 1, got ({n_pairs}, {n_classes})")
    if d_img < 1 or d_txt < 1:
        raise ConfigurationError("feature dims must be positive")
    if intra_class_noise < 0:
        raise ConfigurationError("intra_class_noise must be >= 0")
    if captions_per_image < 1:
        raise ConfigurationError("captions_per_image must be >= 1")
    rng = make_rng(seed, "synthetic")
    img_proto = rng.standard_normal((n_classes, d_img))
    txt_proto = rng.standard_normal((n_classes, d_txt))
    classes = rng.integers(0, n_classes, size=n_pairs)
    image_feats = img_proto[classes] + intra_class_noise * rng.standard_normal((n_pairs, d_img))
    c = captions_per_image
    txt_classes = np.repeat(classes, c)
    text_feats = txt_proto[txt_classes] + intra_class_noise * rng.standard_normal((n_pairs * c, d_txt))
    true_of = np.arange(n_pairs, dtype=np.int64) * c
    meta = {"seed": int(seed), "n_classes": int(n_classes),
            "intra_class_noise": float(intra_class_noise), "noise_ratio": 0.0}
    return PairDataset(image_feats, text_feats, true_of.copy(), true_of.copy(),
                       classes.astype(np.int64), captions_per_image=c, meta=meta)


def inject_noise(ds: PairDataset, ratio: float, seed: int = 0) -> PairDataset:
    """Corrupt floor(ratio * N) uniformly chosen pairs by deranging their
    assigned captions among themselves. Features are shared, never copied."""
    if not (0.0 <= ratio < 1.0):
        raise ConfigurationError(f"noise ratio must be in [0, 1), got {ratio}")
    n = ds.n_images
    k = int(math.floor(ratio * n))
    meta = dict(ds.meta, noise_ratio=float(ratio), noise_seed=int(seed))
    if k == 0:
        return PairDataset(ds.image_feats, ds.text_feats, ds.pair_of.copy(),
                           ds.true_of, ds.latent_class,
                           captions_per_image=ds.captions_per_image, meta=meta)
    if k == 1:
        raise ConfigurationError(
            "cannot mismatch a single pair by derangement; "
            "pick a ratio giving 0 or >= 2 corrupted pairs")
    rng = make_rng(seed, "noise")
    selected = rng.choice(n, size=k, replace=False)
    # rejection-sample a derangement so every selected pair ends up mismatched
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            break
    pair_of = ds.pair_of.copy()
    pair_of[selected] = ds.pair_of[selected][perm]
    return PairDataset(ds.image_feats, ds.text_feats, pair_of, ds.true_of,
                       ds.latent_class, captions_per_image=ds.captions_per_image,
                       meta=meta)


# ---------------------------------------------------------------------------
# container IO
# ---------------------------------------------------------------------------

def _header_dict(ds: PairDataset) -> dict:
    return {
        "schema": _SCHEMA,
        "n_images": ds.n_images,
        "n_texts": ds.n_texts,
        "d_img": ds.d_img,
        "d_txt": ds.d_txt,
        "captions_per_image": ds.captions_per_image,
        "seed": ds.meta.get("seed"),
        "noise_ratio": ds.meta.get("noise_ratio", 0.0),
        "n_classes": ds.meta.get("n_classes"),
        "meta": ds.meta,
    }


def save_dataset(ds: PairDataset, path) -> None:
    """Write the binary container described in the module docstring."""
    header = json.dumps(_header_dict(ds), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.image_feats, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.text_feats, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.pair_of, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.true_of, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.latent_class, dtype="<i8").tobytes())


def _take(buf: bytes, offset: int, count: int, dtype: str, what: str) -> tuple[np.ndarray, int]:
    nbytes = count * np.dtype(dtype).itemsize
    if offset + nbytes > len(buf):
        raise FormatError(f"truncated file while reading {what}", offset=len(buf))
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype)
    return arr, offset + nbytes


def load_dataset(path) -> PairDataset:
    """Read a container written by ``save_dataset``; round-trips bit-exactly."""
    buf = Path(path).read_bytes()
    if len(buf) < len(_MAGIC) + 4:
        raise FormatError("file too short for magic and header length", offset=len(buf))
    if buf[:len(_MAGIC)] != _MAGIC:
        raise FormatError("bad magic, not a dataset container", offset=0)
    hlen = int(np.frombuffer(buf[8:12], dtype="<u4")[0])
    if 12 + hlen > len(buf):
        raise FormatError("truncated header", offset=len(buf))
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt JSON header: {exc}", offset=12) from None
    for key in ("schema", "n_images", "n_texts", "d_img", "d_txt", "captions_per_image"):
        if key not in header:
            raise FormatError(f"header missing key {key!r}", offset=12)
    if header["schema"] != _SCHEMA:
        raise FormatError(f"unsupported schema {header['schema']}", offset=12)
    n, m = int(header["n_images"]), int(header["n_texts"])
    if n == 0:
        raise DegenerateInputError("dataset file contains zero pairs")
    di, dt = int(header["d_img"]), int(header["d_txt"])
    off = 12 + hlen
    img, off = _take(buf, off, n * di, "<f8", "image_feats")
    txt, off = _take(buf, off, m * dt, "<f8", "text_feats")
    pair_of, off = _take(buf, off, n, "<i8", "pair_of")
    true_of, off = _take(buf, off, n, "<i8", "true_of")
    latent, off = _take(buf, off, n, "<i8", "latent_class")
    if off != len(buf):
        raise FormatError("trailing bytes after final block", offset=off)
    return PairDataset(img.reshape(n, di), txt.reshape(m, dt), pair_of, true_of,
                       latent, captions_per_image=int(header["captions_per_image"]),
                       meta=header.get("meta", {}))


def load_features_csv(path) -> np.ndarray:
    """Read a plain CSV feature matrix, one row per sample."""
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"bad CSV feature matrix: {exc}") from None
    if arr.size == 0:
        raise DegenerateInputError("CSV feature matrix is empty")
    return arr


def dataset_from_features(image_feats: np.ndarray, text_feats: np.ndarray) -> PairDataset:
    """Wrap externally produced features as an identity-paired dataset."""
    image_feats = np.asarray(image_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if image_feats.shape[0] != text_feats.shape[0]:
        raise ConfigurationError("image and text feature counts differ")
    n = image_feats.shape[0]
    idx = np.arange(n, dtype=np.int64)
    return PairDataset(image_feats, text_feats, idx.copy(), idx.copy(),
                       np.full(n, -1, dtype=np.int64), meta={"source": "external"})


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Disjoint train/val/test index lists covering a dataset."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        joined = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(joined)) != len(joined):
            raise ConfigurationError("split indices overlap")

    def covers(self, n: int) -> bool:
        return len(self.train) + len(self.val) + len(self.test) == n


def split_indices(n: int, val_fraction: float = 0.1, test_fraction: float = 0.1,
                  seed: int = 0) -> SplitSpec:
    """Shuffled train/val/test split of range(n)."""
    if n < 1:
        raise ConfigurationError("cannot split an empty index range")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ConfigurationError("val/test fractions must be >= 0 and sum below 1")
    perm = make_rng(seed, "split").permutation(n)
    n_val = int(math.floor(val_fraction * n))
    n_test = int(math.floor(test_fraction * n))
    return SplitSpec(train=perm[n_val + n_test:], val=perm[:n_val],
                     test=perm[n_val:n_val + n_test])


def batch_iter(indices, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Shuffled batches of ``indices`` keyed by (seed, epoch).

    The final short batch is kept if it has at least 2 elements (pair losses
    need a negative), otherwise dropped.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    perm = make_rng(seed, "batches", epoch).permutation(indices)
    batches = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches
