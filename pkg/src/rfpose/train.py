"""Training loop, pose metrics, domain splits, ablations, and sensitivity sweeps.

Training minimizes the mean-squared joint error with decoupled-weight-decay
Adam under a per-step cosine learning-rate schedule.  Targets are
standardized (per-coordinate mean, global scale) before regression so the
millimeter-scale outputs are reachable within small step budgets; the
transform is stored in the checkpoint and undone before computing metrics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import dataio
from .net import ModelConfig, PoseRegressor, ShapeMismatch, mse_loss
from .rfsim import perturb_layout, substream

PROTOCOLS = ("per_scene_80_20", "cross_subject", "cross_scene", "cross_layout",
             "cross_orientation", "cross_location")

_FIELD_FOR_PROTOCOL = {
    "cross_subject": "subject_id",
    "cross_scene": "scene_id",
    "cross_layout": "layout_id",
    "cross_orientation": "orientation",
    "cross_location": "location",
}

_STREAM_SPLIT = 21
_STREAM_BATCH = 22
_STREAM_SWEEP = 23


class TrainError(ValueError):
    """Base class for training failures."""


class UnknownHeldOut(TrainError):
    """Requested held-out id does not occur in the dataset."""


class DataMissing(TrainError):
    """Training was asked to run without materialized data."""


class ConfigMismatch(TrainError):
    """Checkpoint and requested configuration disagree."""


# ---------------------------------------------------------------------------
# metrics


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error: average Euclidean joint distance."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.shape[-1] != 3:
        raise ShapeMismatch("last axis must hold xyz coordinates")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def pck(pred, gt, sigma: float) -> float:
    """Percentage of joints with Euclidean error strictly below ``sigma``."""
    if sigma <= 0.0:
        raise TrainError("sigma must be > 0")
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    errors = np.linalg.norm(pred - gt, axis=-1)
    return float((errors < sigma).mean() * 100.0)


@dataclass(frozen=True)
class EvalReport:
    """MPJPE (mm), PCK percentages per threshold, and a per-group breakdown."""

    mpjpe_mm: float
    pck: dict
    breakdown: dict = field(default_factory=dict)

    def __post_init__(self):
        thresholds = sorted(self.pck)
        values = [self.pck[t] for t in thresholds]
        if any(not (0.0 <= v <= 100.0) for v in values):
            raise TrainError("PCK values must lie in [0, 100]")
        if any(b > a for a, b in zip(values[1:], values[:-1])):
            raise TrainError("PCK must be non-decreasing in the threshold")

    def to_dict(self) -> dict:
        return {"mpjpe_mm": self.mpjpe_mm,
                "pck": {str(k): v for k, v in self.pck.items()},
                "breakdown": self.breakdown}


def make_report(pred_mm, gt_mm, thresholds=(20.0, 50.0), groups=None) -> EvalReport:
    pck_map = {float(t): pck(pred_mm, gt_mm, t) for t in thresholds}
    breakdown = {}
    if groups is not None:
        groups = np.asarray(groups)
        for g in sorted(set(groups.tolist())):
            mask = groups == g
            breakdown[str(g)] = mpjpe(pred_mm[mask], gt_mm[mask])
    return EvalReport(mpjpe(pred_mm, gt_mm), pck_map, breakdown)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    protocol: str
    held_out: str | None = None
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise TrainError(f"unknown protocol {self.protocol!r}")


def make_splits(entries: list, spec: SplitSpec) -> tuple:
    """Partition index entries into (train_ids, test_ids); always disjoint."""
    if spec.protocol == "per_scene_80_20":
        train, test = [], []
        scenes = sorted({e["scene_id"] for e in entries})
        for scene in scenes:
            ids = sorted(e["sample_id"] for e in entries if e["scene_id"] == scene)
            rng = substream(spec.seed, _STREAM_SPLIT)
            order = rng.permutation(len(ids))
            n_train = int(round(spec.train_fraction * len(ids)))
            train.extend(ids[i] for i in order[:n_train])
            test.extend(ids[i] for i in order[n_train:])
        return sorted(train), sorted(test)
    key = _FIELD_FOR_PROTOCOL[spec.protocol]
    values = {str(e[key]) for e in entries}
    if str(spec.held_out) not in values:
        raise UnknownHeldOut(f"{spec.held_out!r} not among {sorted(values)}")
    train = sorted(e["sample_id"] for e in entries if str(e[key]) != str(spec.held_out))
    test = sorted(e["sample_id"] for e in entries if str(e[key]) == str(spec.held_out))
    return train, test


# ---------------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    """lr(t) = lr_final + (lr_init - lr_final) (1 + cos(pi t / T)) / 2."""
    if total_steps <= 0:
        return lr_final
    t = min(max(step, 0), total_steps)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    epochs: int = 200
    batch_size: int = 64
    weight_decay: float = 1e-5
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise TrainError("lr_final must not exceed lr_init")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def desk_train_profile() -> TrainConfig:
    return TrainConfig(epochs=30, batch_size=16)


class AdamW:
    """Adam with decoupled weight decay; decay skips biases, norms, and tables."""

    def __init__(self, model: PoseRegressor, config: TrainConfig):
        self.model = model
        self.config = config
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in model.named_parameters().items()}
        self._v = {n: np.zeros_like(p.data) for n, p in model.named_parameters().items()}

    def zero_grad(self):
        for p in self.model.parameters():
            p.zero_grad()

    def step(self, lr: float):
        b1, b2 = self.config.betas
        self.t += 1
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, p in self.model.named_parameters().items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.config.eps)
            if self.config.weight_decay > 0.0 and self.model.decays(name):
                update = update + self.config.weight_decay * p.data
            p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# target standardization


@dataclass(frozen=True)
class TargetTransform:
    """Standardization applied to pose targets during regression (mm units)."""

    mean: np.ndarray  # (J, 3)
    scale: float

    def encode(self, y_mm: np.ndarray) -> np.ndarray:
        return (y_mm - self.mean) / self.scale

    def decode(self, y_std: np.ndarray) -> np.ndarray:
        return y_std * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": float(self.scale)}

    @staticmethod
    def from_dict(doc: dict) -> "TargetTransform":
        return TargetTransform(np.array(doc["mean"], dtype=np.float32), float(doc["scale"]))

    @staticmethod
    def fit(y_mm: np.ndarray) -> "TargetTransform":
        mean = y_mm.reshape(-1, y_mm.shape[-2], 3).mean(axis=0)
        scale = float(max(np.std(y_mm - mean), 1e-6))
        return TargetTransform(mean.astype(np.float32), scale)

    @staticmethod
    def identity(n_joints: int) -> "TargetTransform":
        return TargetTransform(np.zeros((n_joints, 3), dtype=np.float32), 1.0)


# ---------------------------------------------------------------------------
# training and evaluation


def _batch_features(samples, idx) -> np.ndarray:
    x = samples.features[idx]  # (B, N_r, T, H, W) single channel
    return np.broadcast_to(x[:, :, :, None], x.shape[:3] + (3,) + x.shape[3:]).copy()


def train_loop(model: PoseRegressor, samples, config: TrainConfig, mode: str = "conditioned"):
    """Train in place; returns (history, TargetTransform).

    Deterministic for fixed seeds: batch order comes from a seeded
    permutation, dropout masks from (seed, layer, step) substreams, and
    gradient accumulation from the fixed graph traversal order.
    """
    n = samples.n_samples
    if n == 0:
        raise DataMissing("no training samples")
    transform = TargetTransform.fit(samples.poses_mm)
    y_std = transform.encode(samples.poses_mm).astype(np.float32)
    optimizer = AdamW(model, config)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    rng = substream(config.seed, _STREAM_BATCH)
    history = {"epoch": [], "loss": [], "lr": []}
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        lr = config.lr_init
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _batch_features(samples, idx)
            pred = model.forward(x, samples.offsets[idx], mode=mode, train=True, step=step)
            loss = mse_loss(pred, y_std[idx])
            optimizer.zero_grad()
            loss.backward()
            lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)
            optimizer.step(lr)
            losses.append(loss.item())
            step += 1
        history["epoch"].append(epoch)
        history["loss"].append(float(np.mean(losses)))
        history["lr"].append(lr)
    return history, transform


def predict(model: PoseRegressor, samples, transform: TargetTransform,
            mode: str = "conditioned", batch_size: int = 32, offsets=None) -> np.ndarray:
    """Dropout-free batched inference returning millimeter poses (N, T, J, 3)."""
    offsets = samples.offsets if offsets is None else np.asarray(offsets, dtype=float)
    out = []
    with ag.no_grad():
        for start in range(0, samples.n_samples, batch_size):
            idx = np.arange(start, min(start + batch_size, samples.n_samples))
            x = _batch_features(samples, idx)
            pred = model.forward(x, offsets[idx], mode=mode, train=False)
            out.append(pred.data.astype(np.float64))
    return transform.decode(np.concatenate(out, axis=0))


def evaluate(model: PoseRegressor, samples, transform: TargetTransform,
             mode: str = "conditioned", batch_size: int = 32, offsets=None) -> EvalReport:
    pred_mm = predict(model, samples, transform, mode=mode, batch_size=batch_size, offsets=offsets)
    return make_report(pred_mm, samples.poses_mm, groups=samples.layout_ids)


def save_checkpoint(path, model: PoseRegressor, transform: TargetTransform,
                    train_config: TrainConfig, mode: str, extra: dict | None = None):
    header = {
        "model_config": asdict(model.config),
        "train_config": asdict(train_config),
        "target_transform": transform.to_dict(),
        "mode": mode,
        "seed": model.seed,
    }
    if extra:
        header["extra"] = extra
    dataio.write_checkpoint(path, header, {n: p.data for n, p in model.named_parameters().items()})


def load_checkpoint(path) -> tuple:
    """Returns (model, TargetTransform, header)."""
    header, params = dataio.read_checkpoint(path)
    cfg_doc = dict(header["model_config"])
    cfg_doc["head_hidden"] = tuple(cfg_doc.get("head_hidden", (1024, 512)))
    config = ModelConfig(**cfg_doc)
    model = PoseRegressor(config, seed=int(header.get("seed", 0)))
    model.load_state(params)
    transform = TargetTransform.from_dict(header["target_transform"])
    return model, transform, header


# ---------------------------------------------------------------------------
# experiment drivers


def run_ablation(train_samples, test_samples, model_config: ModelConfig,
                 train_config: TrainConfig, modes=("conditioned", "no_align", "no_spatial_pe"),
                 seed: int = 0) -> dict:
    """Train one model per mode on identical data; report test MPJPE per mode."""
    table = {}
    for mode in modes:
        model = PoseRegressor(model_config, seed=seed)
        _, transform = train_loop(model, train_samples, train_config.with_overrides(seed=seed), mode=mode)
        report = evaluate(model, test_samples, transform, mode=mode)
        table[mode] = report.to_dict()
    return table


def sensitivity_sweep(model: PoseRegressor, transform: TargetTransform, samples,
                      sigmas, seed: int = 0, mode: str = "conditioned") -> list:
    """Evaluate one conditioned checkpoint under perturbed device coordinates.

    For each sigma, every layout in the sample set is perturbed once (a
    deterministic draw per (seed, layout)), sample offsets are recomputed
    from the perturbed devices, and the model is re-evaluated.
    """
    layout_ids = sorted(samples.layouts)
    results = []
    for sigma in sigmas:
        if sigma == 0.0:
            offsets = None
        else:
            perturbed = {}
            for i, lid in enumerate(layout_ids):
                rng_seed = int(substream(seed, _STREAM_SWEEP, i).integers(0, 2 ** 31))
                perturbed[lid] = perturb_layout(samples.layouts[lid], sigma, seed=rng_seed)
            offsets = np.stack([perturbed[lid].rx_offsets() for lid in samples.layout_ids])
        report = evaluate(model, samples, transform, mode=mode, offsets=offsets)
        results.append({"sigma": float(sigma), "mpjpe_mm": report.mpjpe_mm,
                        "pck": {str(k): v for k, v in report.pck.items()}})
    return results


def export_features(model: PoseRegressor, samples, mode: str, array_path, labels_path,
                    batch_size: int = 32):
    """Write per-frame decoder-input features plus (layout, sample) labels."""
    rows = []
    labels = []
    with ag.no_grad():
        for start in range(0, samples.n_samples, batch_size):
            idx = np.arange(start, min(start + batch_size, samples.n_samples))
            x = _batch_features(samples, idx)
            z = model.decoder_input(x, samples.offsets[idx], mode=mode)
            rows.append(z.data.reshape(-1, z.shape[-1]).astype(np.float32))
    features = np.concatenate(rows, axis=0)
    dataio.write_array(array_path, features)
    t_seq = model.config.t_seq
    for i in range(samples.n_samples):
        for t in range(t_seq):
            labels.append({"sample_id": samples.sample_ids[i],
                           "layout_id": samples.layout_ids[i], "frame": t})
    dataio.write_json(labels_path, {"schema_version": 1, "kind": "feature_labels",
                                    "count": len(labels), "labels": labels})
    return features.shape
