"""Two-tower embedding model with a shared pseudo-label classifier head.

Each tower is linear -> ReLU -> linear -> L2-normalize, so similarity is a
plain dot product of unit vectors. The classifier head maps embeddings to
pseudo-class logits; both towers share it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, FormatError
from .numerics import (LinearLayer, l2_normalize, l2_normalize_backward,
                       linear_backward, linear_forward, make_rng, relu,
                       relu_backward, softmax)

_CKPT_MAGIC = b"PCSRCK1\n"
_CKPT_SCHEMA = 1
_DIST_FLOOR = 1e-12


class Mlp:
    """Two-layer ReLU MLP with L2-normalized output and manual backward."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator | None = None):
        self.fc1 = LinearLayer(d_in, d_hidden, rng)
        self.fc2 = LinearLayer(d_hidden, d_out, rng)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Embed a (B, d_in) batch; returns (embeddings, cache for backward)."""
        h = linear_forward(self.fc1, x)
        a = relu(h)
        raw = linear_forward(self.fc2, a)
        emb = l2_normalize(raw)
        return emb, (x, h, a, raw)

    def backward(self, cache: tuple, upstream: np.ndarray) -> np.ndarray:
        """Accumulate layer gradients for dL/d(embeddings); returns dL/dx."""
        x, h, a, raw = cache
        d_raw = l2_normalize_backward(raw, upstream)
        d_a = linear_backward(self.fc2, a, d_raw)
        d_h = relu_backward(h, d_a)
        return linear_backward(self.fc1, x, d_h)

    def params(self) -> list[np.ndarray]:
        return self.fc1.params() + self.fc2.params()

    def grads(self) -> list[np.ndarray]:
        return self.fc1.grads() + self.fc2.grads()

    def zero_grad(self):
        self.fc1.zero_grad()
        self.fc2.zero_grad()


@dataclass
class PseudoPrediction:
    """Classifier output for one embedding: full distribution plus argmax."""

    probs: np.ndarray
    label: int


def _predicted_mean_direction(mlp: Mlp) -> np.ndarray:
    """Direction the tower's mean embedding takes at init, from weights alone.

    ReLU keeps hidden activations positive on average, so raw outputs share
    a fixed offset: fc2 applied to the per-unit activation scale, which at
    init is proportional to the fc1 row norm.
    """
    scales = np.linalg.norm(mlp.fc1.weight, axis=1)
    u = mlp.fc2.weight @ scales
    norm = np.linalg.norm(u)
    return u / norm if norm > 0 else u


class ModelParams:
    """Image tower ``f``, text tower ``g``, shared classifier head."""

    def __init__(self, d_img: int, d_txt: int, d_hidden: int, d_embed: int,
                 n_classes: int, seed: int = 0, head_init_scale: float = 20.0):
        if min(d_img, d_txt, d_hidden, d_embed, n_classes) < 1:
            raise ConfigurationError("model dims and class count must be positive")
        rng = make_rng(seed, "model-init")
        self.f = Mlp(d_img, d_hidden, d_embed, rng)
        self.g = Mlp(d_txt, d_hidden, d_embed, rng)
        self.head = LinearLayer(d_embed, n_classes, rng)
        # Start the classifier blind to each tower's shared embedding offset:
        # its rows are projected off the predicted mean directions so that
        # initial pseudo-labels are decided by content rather than by the
        # offset every embedding carries. Without this the first predictions
        # concentrate on a handful of classes and pseudo-label self-training
        # locks onto a single one.
        basis: list[np.ndarray] = []
        for u in (_predicted_mean_direction(self.f),
                  _predicted_mean_direction(self.g)):
            for v in basis:
                u = u - (u @ v) * v
            norm = np.linalg.norm(u)
            if norm > 1e-9:
                basis.append(u / norm)
        for u in basis:
            self.head.weight -= np.outer(self.head.weight @ u, u)
        # Sharp initial pseudo-labels: with near-uniform initial predictions
        # the argmax has no per-sample margin, and the first class to gain
        # batch-mean mass absorbs every prediction. Scaling the (projected)
        # init gives each cluster a sticky label of its own from the start.
        # Gradient tests pass 1.0 here: the sharpened softmax is legitimate
        # for training but ill-conditioned for finite differences.
        self.head.weight *= head_init_scale
        self.dims = {"d_img": d_img, "d_txt": d_txt, "d_hidden": d_hidden,
                     "d_embed": d_embed, "n_classes": n_classes}
        self.seed = int(seed)

    # -- embedding ---------------------------------------------------------

    def embed_image(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm image embedding(s); accepts a vector or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        emb, _ = self.f.forward(np.atleast_2d(x))
        return emb[0] if single else emb

    def embed_text(self, t: np.ndarray) -> np.ndarray:
        """Unit-norm text embedding(s); accepts a vector or a batch."""
        t = np.asarray(t, dtype=np.float64)
        single = t.ndim == 1
        emb, _ = self.g.forward(np.atleast_2d(t))
        return emb[0] if single else emb

    # -- classification ----------------------------------------------------

    def classify_probs(self, emb: np.ndarray) -> np.ndarray:
        """Pseudo-class distributions for a batch of embeddings."""
        return softmax(linear_forward(self.head, emb))

    def classify(self, emb: np.ndarray) -> PseudoPrediction:
        """Distribution and argmax label for a single embedding.

        Ties break toward the lowest class index.
        """
        probs = self.classify_probs(np.atleast_2d(emb))[0]
        return PseudoPrediction(probs=probs, label=int(np.argmax(probs)))

    # -- bookkeeping --------------------------------------------------------

    def tower_params(self) -> list[np.ndarray]:
        return self.f.params() + self.g.params()

    def tower_grads(self) -> list[np.ndarray]:
        return self.f.grads() + self.g.grads()

    def all_params(self) -> list[np.ndarray]:
        return self.tower_params() + self.head.params()

    def all_grads(self) -> list[np.ndarray]:
        return self.tower_grads() + self.head.grads()

    def zero_grad(self):
        self.f.zero_grad()
        self.g.zero_grad()
        self.head.zero_grad()


def similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two embeddings (cosine, since towers emit unit norm)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ConfigurationError("similarity expects two vectors of equal length")
    return float(u @ v)


def similarity_matrix(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """All-pairs similarities between embedding batches."""
    return np.asarray(U, dtype=np.float64) @ np.asarray(V, dtype=np.float64).T


def distribution_similarity(p: np.ndarray, q: np.ndarray) -> float:
    """Cosine similarity of two probability vectors, clamped to [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ConfigurationError("distribution_similarity expects equal-length vectors")
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ < _DIST_FLOOR or nq < _DIST_FLOOR:
        raise DegenerateInputError("zero probability vector has no direction")
    return float(np.clip(p @ q / (np_ * nq), 0.0, 1.0))


def distribution_similarity_matrix(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Rowwise-cosine matrix between two batches of probability vectors."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    pn = np.linalg.norm(P, axis=1, keepdims=True)
    qn = np.linalg.norm(Q, axis=1, keepdims=True)
    if np.any(pn < _DIST_FLOOR) or np.any(qn < _DIST_FLOOR):
        raise DegenerateInputError("zero probability vector has no direction")
    return np.clip((P / pn) @ (Q / qn).T, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _param_blocks(params: ModelParams) -> list[np.ndarray]:
    return [params.f.fc1.weight, params.f.fc1.bias,
            params.f.fc2.weight, params.f.fc2.bias,
            params.g.fc1.weight, params.g.fc1.bias,
            params.g.fc2.weight, params.g.fc2.bias,
            params.head.weight, params.head.bias]


def save_checkpoint(params: ModelParams, path, epoch: int = 0) -> None:
    """Checkpoint container: magic, uint32 header length, JSON header with
    dims/seed/epoch, then every parameter as a little-endian float64 block."""
    header = json.dumps({"schema": _CKPT_SCHEMA, "epoch": int(epoch),
                         "seed": params.seed, **params.dims},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        for block in _param_blocks(params):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int]:
    """Restore (params, epoch) from a checkpoint; round-trips bit-exactly."""
    buf = Path(path).read_bytes()
    if len(buf) < len(_CKPT_MAGIC) + 4 or buf[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError("bad magic, not a checkpoint", offset=0)
    hlen = int(np.frombuffer(buf[8:12], dtype="<u4")[0])
    if 12 + hlen > len(buf):
        raise FormatError("truncated header", offset=len(buf))
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt JSON header: {exc}", offset=12) from None
    needed = ("schema", "epoch", "seed", "d_img", "d_txt", "d_hidden", "d_embed", "n_classes")
    for key in needed:
        if key not in header:
            raise FormatError(f"header missing key {key!r}", offset=12)
    if header["schema"] != _CKPT_SCHEMA:
        raise FormatError(f"unsupported checkpoint schema {header['schema']}", offset=12)
    params = ModelParams(header["d_img"], header["d_txt"], header["d_hidden"],
                         header["d_embed"], header["n_classes"], seed=header["seed"])
    off = 12 + hlen
    for block in _param_blocks(params):
        nbytes = block.size * 8
        if off + nbytes > len(buf):
            raise FormatError("truncated parameter block", offset=len(buf))
        block[:] = np.frombuffer(buf[off:off + nbytes], dtype="<f8").reshape(block.shape)
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after final block", offset=off)
    return params, int(header["epoch"])
