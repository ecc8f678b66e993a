"""Float64 numeric substrate: dense layers with manual gradients, stable
softmax, Adam, a counter-based PRNG, and a finite-difference gradient checker.

Everything operates on plain numpy arrays in double precision. Layers
accumulate gradients into explicit buffers (call ``zero_grad`` between steps);
there is no graph, every backward pass is written out by hand.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, NumericError

_MASK64 = (1 << 64) - 1
_NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise ConfigurationError(f"rng tag must be int or str, got {type(tag).__name__}")


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Seeded generator over the Philox4x64-10 counter-based bit generator.

    The 128-bit Philox key is (splitmix64(seed), fold(tags)) where fold
    absorbs each tag (ints directly, strings via blake2b-64) with one
    splitmix64 round. Identical (seed, tags) give identical streams on every
    platform; distinct tags give independent streams.
    """
    key0 = _splitmix64(int(seed) & _MASK64)
    key1 = 0x243F6A8885A308D3
    for tag in tags:
        key1 = _splitmix64(key1 ^ _tag_to_int(tag))
    key = np.array([key0, key1], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *tags) -> int:
    """Fold tags into a seed, giving an independent deterministic subseed."""
    h = _splitmix64(int(seed) & _MASK64)
    for tag in tags:
        h = _splitmix64(h ^ _tag_to_int(tag))
    return h


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class LinearLayer:
    """Affine map y = W x + b with explicit gradient buffers.

    Weights are Xavier-uniform initialized from ``rng`` (zeros when ``rng``
    is None), biases start at zero.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if n_in < 1 or n_out < 1:
            raise ConfigurationError(f"layer dims must be positive, got ({n_in}, {n_out})")
        if rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            self.weight = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def zero_grad(self):
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """W x + b over the last axis of ``x`` (vector or batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ConfigurationError(
            f"input dim {x.shape[-1]} does not match layer in-dim {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Accumulate dW, db for ``upstream`` at input ``x``; return dx."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != layer.in_dim or upstream.shape[-1] != layer.out_dim:
        raise ConfigurationError("gradient shapes do not match layer dims")
    if x.ndim == 1:
        layer.grad_weight += np.outer(upstream, x)
        layer.grad_bias += upstream
        return layer.weight.T @ upstream
    layer.grad_weight += upstream.T @ x
    layer.grad_bias += upstream.sum(axis=0)
    return upstream @ layer.weight


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gate upstream by the forward activation pattern."""
    return upstream * (x > 0.0)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale rows (last axis) to unit Euclidean norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    return x / norms


def l2_normalize_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dx for y = x / ||x||: (g - y (y.g)) / ||x|| per row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    y = x / norms
    dot = np.sum(y * upstream, axis=-1, keepdims=True)
    return (upstream - y * dot) / norms


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dlogits given probs = softmax(logits) and dL/dprobs."""
    dot = np.sum(probs * upstream, axis=-1, keepdims=True)
    return probs * (upstream - dot)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_backward(log_probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dlogits given log_probs = log_softmax(logits) and dL/dlog_probs."""
    total = upstream.sum(axis=-1, keepdims=True)
    return upstream - np.exp(log_probs) * total


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus step counter for a parameter list."""

    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError("params, grads, and state must align")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ConfigurationError("gradient shape does not match parameter shape")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: list[np.ndarray], grads: list[np.ndarray],
               eps: float = 1e-5) -> float:
    """Max relative error between ``grads`` and central differences of
    ``loss_fn`` over every entry of ``params``.

    ``loss_fn`` takes no arguments and must read the (mutated in place)
    parameter arrays. It is evaluated once up front and the ``grads``
    buffers are snapshotted then, so losses that re-accumulate gradients
    on every call are compared at the unperturbed point. Relative error
    uses max(|analytic|, |numeric|, 1e-8) as denominator, so a constant
    function with zero gradients scores 0.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigurationError(f"eps {eps} outside sensible range [1e-7, 1e-3]")
    base = float(loss_fn())
    if not np.isfinite(base):
        raise NumericError("loss is non-finite at the unperturbed point")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    max_rel = 0.0
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise ConfigurationError("gradient shape does not match parameter shape")
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            hi = float(loss_fn())
            p[idx] = orig - eps
            lo = float(loss_fn())
            p[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("loss is non-finite during finite differencing")
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(numeric), abs(g[idx]), 1e-8)
            max_rel = max(max_rel, abs(numeric - g[idx]) / denom)
    return max_rel
