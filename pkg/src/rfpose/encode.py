"""Geometry and temporal conditioning: Fourier features, embeddings, tokens.

Receiver-minus-transmitter offsets are normalized by a room extent, lifted
through a multi-band sinusoidal map, and projected by a small MLP into the
token dimension.  Tokens fuse the projected CSI feature, the spatial
embedding, a learnable per-frame vector, and a learnable per-receiver bias
by summation followed by LayerNorm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class EncodeError(ValueError):
    """Base class for encoding failures."""


class DimMismatch(EncodeError):
    """Operand dimensions do not line up."""


class IndexOutOfRange(EncodeError):
    """Frame or receiver index outside the configured table."""


class MissingToken(EncodeError):
    """Token grid has a hole."""


@dataclass(frozen=True)
class GeometryVector:
    """RX position relative to TX (meters) plus the normalization extent."""

    offset: np.ndarray
    extent: float = 10.0

    def __post_init__(self):
        offset = np.asarray(self.offset, dtype=float).reshape(3)
        if not np.all(np.isfinite(offset)):
            raise EncodeError("non-finite geometry offset")
        if self.extent <= 0.0:
            raise EncodeError("extent must be > 0")
        if np.any(np.abs(offset) / self.extent > 1.0):
            raise EncodeError("normalized offset must lie in [-1, 1]; increase the extent")
        object.__setattr__(self, "offset", offset)

    def normalized(self) -> np.ndarray:
        return self.offset / self.extent


def fourier_features(p, n_bands: int) -> np.ndarray:
    """Multi-band sinusoidal lift of a normalized 3-vector (or batch thereof).

    Output layout per band k (bands ascending): the three sin(2^k pi p)
    entries, then the three cos(2^k pi p) entries; total dimension 6 K.
    """
    if n_bands < 1:
        raise EncodeError("need at least one frequency band")
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise DimMismatch(f"expected 3-vectors, got trailing dim {p.shape[-1]}")
    parts = []
    for k in range(n_bands):
        arg = (2.0 ** k) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def raw_feature_lift(p, n_bands: int) -> np.ndarray:
    """Ablation stand-in: the raw normalized 3-vector zero-padded to 6 K dims."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise DimMismatch(f"expected 3-vectors, got trailing dim {p.shape[-1]}")
    out = np.zeros(p.shape[:-1] + (6 * n_bands,), dtype=float)
    out[..., :3] = p
    return out


class SpatialEncoder:
    """Two-layer perceptron lifting Fourier features into the token dimension."""

    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        self.d_in = d_in
        self.d_model = d_model
        self.w1 = Tensor(_fan_in_uniform(rng, (d_in, d_model)), requires_grad=True, dtype=dtype, name="spatial.w1")
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype, name="spatial.b1")
        self.w2 = Tensor(_fan_in_uniform(rng, (d_model, d_model)), requires_grad=True, dtype=dtype, name="spatial.w2")
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype, name="spatial.b2")

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, phi) -> Tensor:
        phi = phi if isinstance(phi, Tensor) else Tensor(np.asarray(phi), dtype=self.w1.dtype)
        if phi.shape[-1] != self.d_in:
            raise DimMismatch(f"expected trailing dim {self.d_in}, got {phi.shape[-1]}")
        hidden = ag.gelu(phi @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2


def _fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class EmbeddingTable:
    """Learnable row table (temporal embeddings, receiver biases)."""

    def __init__(self, n_rows: int, d_model: int, rng: np.random.Generator,
                 std: float = 0.02, dtype=np.float32, name: str = "table"):
        self.n_rows = n_rows
        self.table = Tensor(rng.normal(0.0, std, (n_rows, d_model)),
                            requires_grad=True, dtype=dtype, name=name)

    def parameters(self) -> list:
        return [self.table]

    def lookup(self, idx) -> Tensor:
        idx = np.asarray(idx, dtype=int)
        if np.any(idx < 0) or np.any(idx >= self.n_rows):
            raise IndexOutOfRange(f"index out of range for table with {self.n_rows} rows")
        return ag.gather_rows(self.table, idx)


class TokenBuilder:
    """Projection-and-summation fusion: u = LayerNorm(W_f f + W_e e + r + s)."""

    def __init__(self, d_feature: int, d_model: int, rng: np.random.Generator,
                 eps: float = 1e-5, dtype=np.float32):
        self.d_feature = d_feature
        self.d_model = d_model
        self.eps = eps
        self.w_f = Tensor(_fan_in_uniform(rng, (d_feature, d_model)), requires_grad=True, dtype=dtype, name="token.w_f")
        self.w_e = Tensor(_fan_in_uniform(rng, (d_model, d_model)), requires_grad=True, dtype=dtype, name="token.w_e")
        self.gamma = Tensor(np.ones(d_model), requires_grad=True, dtype=dtype, name="token.gamma")
        self.beta = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype, name="token.beta")

    def parameters(self) -> list:
        return [self.w_f, self.w_e, self.gamma, self.beta]

    def __call__(self, feature: Tensor, spatial: Tensor | None, temporal: Tensor, receiver: Tensor) -> Tensor:
        if feature.shape[-1] != self.d_feature:
            raise DimMismatch(f"feature dim {feature.shape[-1]} != {self.d_feature}")
        pre = feature @ self.w_f
        if spatial is not None:
            if spatial.shape[-1] != self.d_model:
                raise DimMismatch(f"spatial dim {spatial.shape[-1]} != {self.d_model}")
            pre = pre + spatial @ self.w_e
        pre = pre + temporal + receiver
        return ag.layer_norm(pre, eps=self.eps) * self.gamma + self.beta


def build_sequence(token_grid) -> list:
    """Flatten an (N_r, T) token grid receiver-major: index(n, t) = n * T + t.

    ``token_grid`` is a nested sequence; a None entry raises MissingToken.
    """
    seq = []
    n_time = None
    for n, row in enumerate(token_grid):
        row = list(row)
        if n_time is None:
            n_time = len(row)
        elif len(row) != n_time:
            raise MissingToken(f"receiver {n} has {len(row)} tokens, expected {n_time}")
        for t, token in enumerate(row):
            if token is None:
                raise MissingToken(f"missing token at receiver {n}, frame {t}")
            seq.append(token)
    return seq
