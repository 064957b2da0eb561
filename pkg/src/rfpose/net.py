"""Conditioned pose regressor: shared conv encoder, transformer, pose head.

The network follows the geometry-conditioned recipe: per-receiver feature
maps go through one weight-shared convolutional encoder, get fused with
spatial/temporal/receiver embeddings into tokens, pass through a pre-LN
transformer over all receiver-time tokens, and a per-frame MLP head
regresses world-frame joint coordinates.

Three forward modes support the ablations: "conditioned" (full model),
"no_align" (spatial embedding term removed from the token sum), and
"no_spatial_pe" (raw normalized offsets, zero-padded, in place of the
multi-band sinusoidal lift).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from . import encode
from .autograd import Tensor, grad_check  # noqa: F401  (grad_check re-exported)
from .rfsim import substream

MODES = ("conditioned", "no_align", "no_spatial_pe")

_STREAM_INIT = 11
_STREAM_DROPOUT = 12


class NetError(ValueError):
    """Base class for network failures."""


class ShapeMismatch(NetError):
    """Operand shapes do not match the configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``paper_profile`` holds the published ones."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    n_joints: int = 17
    n_receivers: int = 3
    t_seq: int = 8
    conv_base: int = 8
    n_bands: int = 10
    feature_size: int = 64
    extent: float = 10.0
    head_hidden: tuple = (1024, 512)

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "n_joints",
                     "n_receivers", "t_seq", "conv_base", "n_bands", "feature_size"):
            if getattr(self, name) < 1:
                raise NetError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise NetError("d_model must be divisible by n_heads")
        if not (0.0 <= self.dropout < 1.0):
            raise NetError("dropout must be in [0, 1)")

    @property
    def d_p(self) -> int:
        return 6 * self.n_bands

    @property
    def d_feature(self) -> int:
        return self.conv_base * 8  # four conv blocks, channels doubling

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


def paper_profile() -> ModelConfig:
    """The full-scale configuration (512-dim, 6 layers, 224px feature maps)."""
    return ModelConfig(d_model=512, n_layers=6, n_heads=8, ffn_dim=2048, dropout=0.1,
                       n_joints=17, n_receivers=3, t_seq=8, conv_base=64,
                       n_bands=10, feature_size=224, extent=10.0)


def desk_profile() -> ModelConfig:
    """Small configuration that trains in minutes on one CPU core."""
    return ModelConfig()


def _fan_in_uniform(rng, shape):
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class PoseRegressor:
    """Full geometry-conditioned model with a flat named-parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = dtype
        rng = substream(seed, _STREAM_INIT)
        self._params: dict[str, Tensor] = {}
        self._no_decay: set[str] = set()

        chans = [3] + [config.conv_base * (2 ** i) for i in range(4)]
        for i in range(4):
            self._add(f"conv{i}.weight", _fan_in_uniform(rng, (chans[i + 1], chans[i], 3, 3)))
            self._add(f"conv{i}.bias", np.zeros(chans[i + 1]), decay=False)

        self.spatial = encode.SpatialEncoder(config.d_p, config.d_model, rng, dtype=dtype)
        for t in self.spatial.parameters():
            self._register(t, decay=t.ndim >= 2)
        self.temporal = encode.EmbeddingTable(config.t_seq, config.d_model, rng,
                                              dtype=dtype, name="temporal.table")
        self.receiver = encode.EmbeddingTable(config.n_receivers, config.d_model, rng,
                                              dtype=dtype, name="receiver.table")
        for t in self.temporal.parameters() + self.receiver.parameters():
            self._register(t, decay=False)
        self.token = encode.TokenBuilder(config.d_feature, config.d_model, rng, dtype=dtype)
        for t in self.token.parameters():
            self._register(t, decay=t.ndim >= 2)

        d = config.d_model
        for layer in range(config.n_layers):
            p = f"layer{layer}."
            self._add(p + "ln1.gamma", np.ones(d), decay=False)
            self._add(p + "ln1.beta", np.zeros(d), decay=False)
            for name in ("wq", "wk", "wv", "wo"):
                self._add(p + name, _fan_in_uniform(rng, (d, d)))
                self._add(p + name + "_bias", np.zeros(d), decay=False)
            self._add(p + "ln2.gamma", np.ones(d), decay=False)
            self._add(p + "ln2.beta", np.zeros(d), decay=False)
            self._add(p + "ffn.w1", _fan_in_uniform(rng, (d, config.ffn_dim)))
            self._add(p + "ffn.b1", np.zeros(config.ffn_dim), decay=False)
            self._add(p + "ffn.w2", _fan_in_uniform(rng, (config.ffn_dim, d)))
            self._add(p + "ffn.b2", np.zeros(d), decay=False)

        dims = [config.n_receivers * d, *config.head_hidden, config.n_joints * 3]
        for i in range(len(dims) - 1):
            self._add(f"head.w{i}", _fan_in_uniform(rng, (dims[i], dims[i + 1])))
            self._add(f"head.b{i}", np.zeros(dims[i + 1]), decay=False)

    # -- registry ----------------------------------------------------------
    def _add(self, name: str, data, decay: bool = True):
        t = Tensor(data, requires_grad=True, dtype=self.dtype, name=name)
        self._register(t, decay)

    def _register(self, t: Tensor, decay: bool):
        if t.name in self._params:
            raise NetError(f"duplicate parameter {t.name}")
        self._params[t.name] = t
        if not decay:
            self._no_decay.add(t.name)

    def parameters(self) -> list:
        return list(self._params.values())

    def named_parameters(self) -> dict:
        return dict(self._params)

    def decays(self, name: str) -> bool:
        return name not in self._no_decay

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def load_state(self, state: dict):
        for name, value in state.items():
            if name not in self._params:
                raise NetError(f"unknown parameter {name} in checkpoint")
            if self._params[name].shape != value.shape:
                raise ShapeMismatch(f"{name}: checkpoint {value.shape} vs model {self._params[name].shape}")
            self._params[name].data = value.astype(self.dtype)

    # -- blocks ------------------------------------------------------------
    def conv_encoder(self, x) -> Tensor:
        """Shared CNN encoder: (N, 3, H, W) feature maps -> (N, d_feature)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3, H, W), got {x.shape}")
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ShapeMismatch("feature maps must be at least 16 x 16")
        for i in range(4):
            x = ag.conv2d(x, self._params[f"conv{i}.weight"], self._params[f"conv{i}.bias"],
                          stride=2, pad=1)
            x = ag.gelu(x)
        return x.mean(axis=(2, 3))

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return ag.layer_norm(x) * self._params[prefix + ".gamma"] + self._params[prefix + ".beta"]

    def attention(self, x: Tensor, layer: int) -> Tensor:
        """Full multi-head self-attention over the token axis of (B, S, D)."""
        cfg = self.config
        b, s, d = x.shape
        dh = d // cfg.n_heads
        p = f"layer{layer}."

        def proj(name):
            y = x @ self._params[p + name] + self._params[p + name + "_bias"]
            return ag.transpose(ag.reshape(y, (b, s, cfg.n_heads, dh)), (0, 2, 1, 3))

        q, k, v = proj("wq"), proj("wk"), proj("wv")
        scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (b, s, d))
        return ctx @ self._params[p + "wo"] + self._params[p + "wo_bias"]

    def transformer_forward(self, x, train: bool = False, step: int = 0) -> Tensor:
        """Pre-LN encoder stack: x <- x + MSA(LN(x)); x <- x + FFN(LN(x))."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 3 or x.shape[-1] != self.config.d_model:
            raise ShapeMismatch(f"expected (B, S, {self.config.d_model}), got {x.shape}")
        for layer in range(self.config.n_layers):
            p = f"layer{layer}."
            x = x + self.attention(self._layer_norm(x, p + "ln1"), layer)
            h = ag.gelu(self._layer_norm(x, p + "ln2") @ self._params[p + "ffn.w1"] + self._params[p + "ffn.b1"])
            if train and self.config.dropout > 0.0:
                h = ag.dropout(h, self.config.dropout, substream(self.seed, _STREAM_DROPOUT, layer, step))
            x = x + (h @ self._params[p + "ffn.w2"] + self._params[p + "ffn.b2"])
        return x

    def pose_head(self, z) -> Tensor:
        """Per-frame decoder: (..., N_r * D) -> (..., J, 3)."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z), dtype=self.dtype)
        expected = self.config.n_receivers * self.config.d_model
        if z.shape[-1] != expected:
            raise ShapeMismatch(f"expected trailing dim {expected}, got {z.shape[-1]}")
        n_hidden = len(self.config.head_hidden)
        for i in range(n_hidden):
            z = ag.gelu(z @ self._params[f"head.w{i}"] + self._params[f"head.b{i}"])
        z = z @ self._params[f"head.w{n_hidden}"] + self._params[f"head.b{n_hidden}"]
        return ag.reshape(z, z.shape[:-1] + (self.config.n_joints, 3))

    def spatial_embedding(self, offsets: np.ndarray, mode: str) -> Tensor | None:
        """Geometry conditioning term for token fusion; None in no_align mode."""
        if mode not in MODES:
            raise NetError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "no_align":
            return None
        normalized = np.asarray(offsets, dtype=float) / self.config.extent
        if mode == "conditioned":
            phi = encode.fourier_features(normalized, self.config.n_bands)
        else:
            phi = encode.raw_feature_lift(normalized, self.config.n_bands)
        return self.spatial(Tensor(phi, dtype=self.dtype))

    def decoder_input(self, feature_maps, offsets, mode: str = "conditioned",
                      train: bool = False, step: int = 0) -> Tensor:
        """Everything up to the pose head: returns per-frame blocks (B, T, N_r * D)."""
        cfg = self.config
        x = np.asarray(feature_maps, dtype=self.dtype)
        if x.ndim != 6 or x.shape[1] != cfg.n_receivers or x.shape[2] != cfg.t_seq:
            raise ShapeMismatch(
                f"expected (B, {cfg.n_receivers}, {cfg.t_seq}, 3, H, W), got {x.shape}")
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != (x.shape[0], cfg.n_receivers, 3):
            raise ShapeMismatch(f"offsets must be (B, N_r, 3), got {offsets.shape}")
        b = x.shape[0]

        feats = self.conv_encoder(Tensor(x.reshape((-1, 3) + x.shape[4:]), dtype=self.dtype))
        feats = ag.reshape(feats, (b, cfg.n_receivers, cfg.t_seq, cfg.d_feature))

        spatial = self.spatial_embedding(offsets, mode)
        if spatial is not None:
            spatial = ag.reshape(spatial, (b, cfg.n_receivers, 1, cfg.d_model))
        temporal = ag.reshape(self.temporal.lookup(np.arange(cfg.t_seq)), (1, 1, cfg.t_seq, cfg.d_model))
        receiver = ag.reshape(self.receiver.lookup(np.arange(cfg.n_receivers)), (1, cfg.n_receivers, 1, cfg.d_model))

        tokens = self.token(feats, spatial, temporal, receiver)
        seq = ag.reshape(tokens, (b, cfg.n_receivers * cfg.t_seq, cfg.d_model))
        ctx = self.transformer_forward(seq, train=train, step=step)
        grid = ag.reshape(ctx, (b, cfg.n_receivers, cfg.t_seq, cfg.d_model))
        return ag.reshape(ag.transpose(grid, (0, 2, 1, 3)), (b, cfg.t_seq, cfg.n_receivers * cfg.d_model))

    def forward(self, feature_maps, offsets, mode: str = "conditioned",
                train: bool = False, step: int = 0) -> Tensor:
        """Full pipeline: (B, N_r, T, 3, H, W) maps + (B, N_r, 3) offsets -> (B, T, J, 3)."""
        return self.pose_head(self.decoder_input(feature_maps, offsets, mode=mode,
                                                 train=train, step=step))


def mse_loss(pred, gt) -> Tensor:
    """Mean over (frames, joints) of the squared Euclidean joint error."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    gt_data = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt_data.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt_data.shape}")
    if pred.shape[-1] != 3:
        raise ShapeMismatch("last axis must hold xyz coordinates")
    n_terms = pred.data.size // 3
    diff = pred - Tensor(gt_data, dtype=pred.dtype)
    return (diff * diff).sum() / float(n_terms)
