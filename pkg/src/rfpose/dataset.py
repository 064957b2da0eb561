"""Synthetic dataset recipe: scenes, clips, materialization, and sample loading.

The cross-layout experiment uses three layouts that are planar rotations of
one transmitter-centered rig, with subject locations and orientations
defined in the rig frame and rotated along with it.  Relative body-device
geometry is therefore identically distributed across layouts while
world-frame poses (the regression targets) differ by the rig rotation: a
model without geometry conditioning cannot tell the layouts apart from CSI
alone, while the receiver-offset embeddings disambiguate them exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import csi as csimod
from . import dataio
from .geometry import DeviceLayout, RigidTransform, make_transform, rotation_about_axis
from .rfsim import RFScene, generate_motion, substream, synth_csi

_STREAM_CLIP = 31


@dataclass(frozen=True)
class SimConfig:
    """Recipe for the synthetic corpus: 3 layouts x 5 locations x 3 orientations x 6 actions."""

    layout_angles_deg: tuple = (-50.0, 40.0, 0.0)
    rx_rig_angles_deg: tuple = (0.0, 115.0, 220.0)
    rx_radius: float = 1.2
    device_height: float = 1.0
    locations: tuple = ((1.5, 0.0), (-1.1, 1.0), (0.2, -1.6), (1.2, 1.3), (-1.4, -0.8))
    orientations_deg: tuple = (-45.0, 0.0, 45.0)
    actions: tuple = ("squat", "both_arms_stretch", "left_forward_lunge",
                      "jumping_jack", "pick_up", "right_lateral_raise")
    frames_per_clip: int = 16
    frame_rate: float = 30.0
    sample_rate: float = 480.0
    n_subcarriers: int = 16
    carrier_freq: float = 5.2e9
    bandwidth: float = 20e6
    n_antennas: int = 3
    joint_reflectivity: complex = 1.0 + 0.0j
    noise_std: float = 1e-3
    drift_step_std: float = 0.05

    @property
    def n_layouts(self) -> int:
        return len(self.layout_angles_deg)

    def with_overrides(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)

    def layout_ids(self) -> list:
        return [f"L{i + 1}" for i in range(self.n_layouts)]

    def build_layout(self, layout_index: int) -> DeviceLayout:
        """Rig rotated about +z by the layout angle; TX sits at the world origin."""
        theta = math.radians(self.layout_angles_deg[layout_index])
        rxs = []
        for rig_angle in self.rx_rig_angles_deg:
            a = theta + math.radians(rig_angle)
            rxs.append(np.array([self.rx_radius * math.cos(a),
                                 self.rx_radius * math.sin(a),
                                 self.device_height]))
        tx = np.array([0.0, 0.0, self.device_height])
        return DeviceLayout(tx=tx, rxs=tuple(rxs),
                            provenance=(f"synthetic rig rotation {self.layout_angles_deg[layout_index]} deg",))

    def build_scene(self, layout: DeviceLayout) -> RFScene:
        n_rx = layout.n_receivers
        gains = np.empty((n_rx, self.n_antennas), dtype=complex)
        for r in range(n_rx):
            for a in range(self.n_antennas):
                gains[r, a] = (0.8 + 0.1 * r + 0.15 * a) * np.exp(1j * (0.3 * a - 0.2 * r))
        return RFScene(layout=layout, carrier_freq=self.carrier_freq, bandwidth=self.bandwidth,
                       n_subcarriers=self.n_subcarriers, sample_rate=self.sample_rate,
                       n_antennas=self.n_antennas, antenna_gains=gains,
                       joint_reflectivity=self.joint_reflectivity,
                       noise_std=self.noise_std, drift_step_std=self.drift_step_std)


def tiny_sim_config() -> SimConfig:
    """Two-layout, four-clip corpus for end-to-end smoke runs."""
    return SimConfig(layout_angles_deg=(-40.0, 20.0), locations=((1.4, 0.2),),
                     orientations_deg=(0.0,), actions=("squat", "jumping_jack"),
                     frames_per_clip=8)


def clip_metadata(config: SimConfig) -> list:
    """Deterministic enumeration of every clip in the recipe."""
    clips = []
    for li in range(config.n_layouts):
        lid = config.layout_ids()[li]
        for pi, loc in enumerate(config.locations):
            for oi, _orient in enumerate(config.orientations_deg):
                for ai, action in enumerate(config.actions):
                    clips.append({
                        "sample_id": f"{lid}_p{pi}_o{oi}_{action}",
                        "scene_id": lid,
                        "layout_id": lid,
                        "subject_id": f"s{(pi + oi + ai) % 3}",
                        "location": f"p{pi}",
                        "orientation": f"o{oi}",
                        "action": action,
                        "layout_index": li,
                        "location_index": pi,
                        "orientation_index": oi,
                        "action_index": ai,
                    })
    return clips


def simulate_dataset(config: SimConfig, out_dir, seed: int = 0) -> str:
    """Materialize the synthetic corpus (CSI, poses, calibrations, index).

    Pose files hold world-frame joint trajectories in millimeters; CSI files
    hold complex64 tensors (antennas x subcarriers x time) per receiver.
    Returns the index path.
    """
    out_dir = os.fspath(out_dir)
    for sub in ("csi", "poses", "calibration"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    layouts = [config.build_layout(i) for i in range(config.n_layouts)]
    for i, layout in enumerate(layouts):
        theta = math.radians(config.layout_angles_deg[i])
        rig_to_world = make_transform(rotation_about_axis([0, 0, 1], theta), [0.0, 0.0, 0.0])
        record = dataio.CalibrationRecord(config.layout_ids()[i], layout,
                                          {"rig_to_world": rig_to_world})
        dataio.write_calibration(os.path.join(out_dir, "calibration", f"{record.layout_id}.json"), record)

    duration = config.frames_per_clip / config.frame_rate
    entries = []
    for clip in clip_metadata(config):
        li = clip["layout_index"]
        theta = math.radians(config.layout_angles_deg[li])
        rot = rotation_about_axis([0, 0, 1], theta)
        loc = config.locations[clip["location_index"]]
        base = rot @ np.array([loc[0], loc[1], 0.0])
        orientation = theta + math.radians(config.orientations_deg[clip["orientation_index"]])
        clip_seed = int(substream(seed, _STREAM_CLIP, li, clip["location_index"],
                                  clip["orientation_index"], clip["action_index"]).integers(0, 2 ** 31))
        trajectory = generate_motion(clip["action"], duration, config.frame_rate,
                                     base_position=base, orientation=orientation, seed=clip_seed)
        scene = config.build_scene(layouts[li])
        tensors = synth_csi(scene, trajectory, seed=clip_seed)
        csi_paths = []
        for rx_i, tensor in enumerate(tensors):
            rel = os.path.join("csi", f"{clip['sample_id']}_rx{rx_i}.pacs")
            dataio.write_array(os.path.join(out_dir, rel), tensor.data.astype(np.complex64))
            csi_paths.append(rel)
        pose_rel = os.path.join("poses", f"{clip['sample_id']}.pacs")
        dataio.write_array(os.path.join(out_dir, pose_rel), trajectory.frames * 1000.0)
        entries.append({
            **{k: clip[k] for k in ("sample_id", "scene_id", "layout_id", "subject_id",
                                    "location", "orientation", "action")},
            "csi_paths": csi_paths,
            "pose_path": pose_rel,
            "calibration_path": os.path.join("calibration", f"{clip['layout_id']}.json"),
            "n_frames": config.frames_per_clip,
            "frame_rate": config.frame_rate,
        })
    index_path = os.path.join(out_dir, "index.json")
    dataio.write_index(index_path, entries)
    meta = {"schema_version": 1, "kind": "sim_manifest", "seed": seed,
            "sample_rate": config.sample_rate, "n_subcarriers": config.n_subcarriers,
            "carrier_freq": config.carrier_freq, "bandwidth": config.bandwidth,
            "layout_angles_deg": list(config.layout_angles_deg)}
    dataio.write_json(os.path.join(out_dir, "sim_manifest.json"), meta)
    return index_path


def preprocess_dataset(index_path, out_dir, feature_size: int = 32,
                       window: int | None = None, hop: int | None = None) -> str:
    """Cache one feature tensor per clip: (n_rx, n_frames, H, W) float32.

    The cached array stores the single replicated channel; loaders broadcast
    back to the 3-channel layout the encoder expects.  Returns the manifest
    path.
    """
    entries = dataio.read_index(index_path)
    root = os.path.dirname(os.fspath(index_path))
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    meta = dataio.read_json(os.path.join(root, "sim_manifest.json"))
    for entry in entries:
        per_rx = []
        for rel in entry["csi_paths"]:
            raw = dataio.read_array(os.path.join(root, rel)).astype(np.complex128)
            m = raw.shape[1]
            if m == 1:
                freqs = np.array([meta["carrier_freq"]])
            else:
                freqs = np.linspace(meta["carrier_freq"] - meta["bandwidth"] / 2.0,
                                    meta["carrier_freq"] + meta["bandwidth"] / 2.0, m)
            tensor = csimod.CsiTensor(raw, meta["sample_rate"], freqs)
            stream = csimod.ratio(tensor, 0, 1)
            groups = csimod.group(stream, entry["n_frames"])
            frames = [csimod.features(g, size=feature_size, window=window, hop=hop).data[0]
                      for g in groups]
            per_rx.append(np.stack(frames))
        arr = np.stack(per_rx).astype(np.float32)  # (n_rx, n_frames, H, W)
        dataio.write_array(os.path.join(out_dir, f"{entry['sample_id']}.pacs"), arr)
    manifest_path = os.path.join(out_dir, "features_manifest.json")
    dataio.write_json(manifest_path, {"schema_version": 1, "kind": "features_manifest",
                                      "feature_size": feature_size, "index": os.path.abspath(index_path)})
    return manifest_path


@dataclass
class SampleSet:
    """Windowed training/eval samples materialized as dense arrays."""

    features: np.ndarray  # (N, n_rx, t_seq, H, W) float32, single channel
    poses_mm: np.ndarray  # (N, t_seq, J, 3) float64
    offsets: np.ndarray   # (N, n_rx, 3) float64, rx - tx
    sample_ids: list
    clip_ids: list
    layout_ids: list
    layouts: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=int)
        return SampleSet(self.features[indices], self.poses_mm[indices], self.offsets[indices],
                         [self.sample_ids[i] for i in indices],
                         [self.clip_ids[i] for i in indices],
                         [self.layout_ids[i] for i in indices],
                         dict(self.layouts))


def load_samples(index_path, features_dir, clip_ids, t_seq: int = 8) -> SampleSet:
    """Assemble non-overlapping t_seq windows for the selected clips."""
    entries = {e["sample_id"]: e for e in dataio.read_index(index_path)}
    root = os.path.dirname(os.fspath(index_path))
    features, poses, offsets = [], [], []
    sample_ids, clips, layout_ids = [], [], []
    layouts = {}
    for clip_id in clip_ids:
        if clip_id not in entries:
            raise KeyError(f"clip {clip_id!r} not in index")
        entry = entries[clip_id]
        feats = dataio.read_array(os.path.join(os.fspath(features_dir), f"{clip_id}.pacs"))
        pose = dataio.read_array(os.path.join(root, entry["pose_path"]))
        lid = entry["layout_id"]
        if lid not in layouts:
            record = dataio.read_calibration(os.path.join(root, entry["calibration_path"]))
            layouts[lid] = record.layout
        rx_offsets = layouts[lid].rx_offsets()
        n_frames = feats.shape[1]
        for w in range(n_frames // t_seq):
            sl = slice(w * t_seq, (w + 1) * t_seq)
            features.append(feats[:, sl])
            poses.append(pose[sl])
            offsets.append(rx_offsets)
            sample_ids.append(f"{clip_id}#w{w}")
            clips.append(clip_id)
            layout_ids.append(lid)
    if not features:
        raise ValueError("no samples selected")
    return SampleSet(np.stack(features).astype(np.float32),
                     np.stack(poses).astype(np.float64),
                     np.stack(offsets).astype(np.float64),
                     sample_ids, clips, layout_ids, layouts)
