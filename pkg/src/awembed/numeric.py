"""Dense numeric primitives the rest of the toolkit is built on.

Vectors are 1-D numpy arrays, matrices 2-D; the dtype of the inputs is
preserved (training runs in float32, gradient verification in float64).
All functions are pure; randomness enters only through an explicitly
passed :class:`RandomSource`.
"""

import hashlib
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DegenerateVectorError, GradCheckError, ShapeError

__all__ = [
    "Precision",
    "RandomSource",
    "affine",
    "activation",
    "log_softmax",
    "cosine_distance",
    "dropout_mask",
    "grad_check",
]


class Precision(Enum):
    """Floating-point width: single for training, double for verification."""

    single = "float32"
    double = "float64"

    @property
    def dtype(self):
        return np.dtype(self.value)


class RandomSource:
    """Seeded random stream with labeled, independent child streams.

    Built on the counter-based Philox generator: the same seed always
    produces the same draw sequence, and :meth:`split` derives a child
    stream keyed by a label so that initialization, shuffling, dropout and
    sampling can each be varied independently.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, label):
        """Return an independent child source derived from ``label``."""
        key = self.seed.to_bytes(8, "little")
        digest = hashlib.blake2b(label.encode("utf-8"), key=key, digest_size=8)
        return RandomSource(int.from_bytes(digest.digest(), "little"))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc, scale, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None):
        """One integer in ``[low, high)``; ``integers(n)`` means ``[0, n)``."""
        return int(self._gen.integers(low, high))

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice_pmf(self, pmf):
        """Inverse-CDF draw from an unnormalized mass vector.

        Entries with zero mass are never selected.
        """
        cdf = np.cumsum(np.asarray(pmf, dtype=np.float64))
        if cdf[-1] <= 0.0:
            raise ValueError("choice_pmf requires positive total mass")
        u = self._gen.random() * cdf[-1]
        return int(np.searchsorted(cdf, u, side="right"))


def affine(weights, x, bias):
    """Return ``weights @ x + bias`` after validating that shapes line up."""
    w = np.asarray(weights)
    v = np.asarray(x)
    b = np.asarray(bias)
    if w.ndim != 2 or v.ndim != 1 or b.ndim != 1:
        raise ShapeError(
            f"affine expects matrix/vector/vector, got ndim {w.ndim}/{v.ndim}/{b.ndim}"
        )
    if w.shape[1] != v.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: weights {w.shape}, x {v.shape}, bias {b.shape}"
        )
    return w @ v + b


def activation(kind, x):
    """Componentwise sigmoid, tanh, or relu."""
    x = np.asarray(x)
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ConfigError(f"unknown activation kind {kind!r}")


def log_softmax(x):
    """``x - logsumexp(x)`` along the last axis, max-shifted for stability."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cosine_distance(x, y):
    """``1 - cos(x, y)``; raises on zero-norm inputs rather than returning NaN."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"cosine_distance shape mismatch: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVectorError("cosine distance undefined for zero-norm vector")
    cos = float(np.dot(x, y) / (nx * ny))
    return 1.0 - min(1.0, max(-1.0, cos))


def dropout_mask(rng, dim, p, dtype=np.float32):
    """Inverted-dropout mask: 0 with probability ``p``, else ``1/(1-p)``.

    ``dim`` may be an int or a shape tuple.  The stream is consumed even
    for ``p = 0`` so mask sequences stay aligned across configurations.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(dim) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=dtype)
    return keep.astype(dtype) * scale


def grad_check(loss_fn, params, step=1e-3, loss_only_fn=None):
    """Compare an analytic gradient against central finite differences.

    ``loss_fn`` maps a float64 parameter vector to ``(loss, gradient)``;
    ``loss_only_fn``, when given, is a cheaper probe that returns just the
    loss.  Returns the worst relative error
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`` over all coordinates.
    """
    theta = np.array(params, dtype=np.float64)
    probe = loss_only_fn if loss_only_fn is not None else lambda t: loss_fn(t)[0]
    loss, grad = loss_fn(theta)
    if not np.isfinite(loss):
        raise GradCheckError("non-finite loss at the base point")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    worst = 0.0
    bump = np.zeros_like(theta)
    for k in range(theta.size):
        bump[k] = step
        hi = float(probe(theta + bump))
        lo = float(probe(theta - bump))
        bump[k] = 0.0
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradCheckError("non-finite loss while probing", coordinate=k)
        numeric = (hi - lo) / (2.0 * step)
        denom = max(abs(grad[k]), abs(numeric), 1e-8)
        worst = max(worst, abs(grad[k] - numeric) / denom)
    return worst
