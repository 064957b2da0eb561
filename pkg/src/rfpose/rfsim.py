"""Finite-path synthetic CSI forward model plus parametric skeleton motion.

The propagation model is deliberately minimal: a line-of-sight path, one
single-bounce path per static scatterer, and one single-bounce path per
skeleton joint, each with free-space 1/(4*pi*d1*d2) amplitude.  The channel
at subcarrier f and time t is the phasor sum over those paths; receivers
apply a static per-antenna complex gain, a shared random-walk phase drift
(cancelled exactly by the CSI ratio), and additive complex Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .csi import CsiTensor
from .geometry import DeviceLayout, rotation_about_axis

SPEED_OF_LIGHT = 299792458.0

# Substream tags so every random draw is tied to (seed, purpose, indices).
_STREAM_MOTION = 1
_STREAM_DRIFT = 2
_STREAM_NOISE = 3
_STREAM_PERTURB = 4

ACTIONS = (
    "left_arm_stretch",
    "right_arm_stretch",
    "both_arms_stretch",
    "left_lateral_raise",
    "right_lateral_raise",
    "left_forward_lunge",
    "right_forward_lunge",
    "left_side_lunge",
    "right_side_lunge",
    "jump",
    "pick_up",
    "clockwise_spin",
    "counterclockwise_spin",
    "jumping_jack",
    "squat",
    "left_rotation",
    "right_rotation",
    "directional_hops",
)

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head", "nose",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

N_JOINTS = len(JOINT_NAMES)


class RfSimError(ValueError):
    """Base class for simulator failures."""


class UnknownAction(RfSimError):
    """Action label is not one of the supported motions."""


class RateMismatch(RfSimError):
    """CSI sample rate is not an integer multiple of the skeleton frame rate."""


def substream(seed, *tags) -> np.random.Generator:
    """Deterministic RNG derived from a seed and integer tags (schedule independent)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags)))


@dataclass(frozen=True)
class SkeletonTrajectory:
    """Time-indexed joint positions (frames, joints, 3) in meters, world frame."""

    frames: np.ndarray
    frame_rate: float
    action: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise RfSimError(f"frames must be (T, J, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise RfSimError("non-finite joint coordinates")
        if self.frame_rate <= 0.0:
            raise RfSimError("frame_rate must be > 0")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


def empty_trajectory(duration: float, frame_rate: float) -> SkeletonTrajectory:
    """A trajectory with zero joints, for simulating device-only scenes."""
    n = int(round(duration * frame_rate))
    if n <= 0:
        raise RfSimError("duration must cover at least one frame")
    return SkeletonTrajectory(np.zeros((n, 0, 3)), frame_rate, action="")


@dataclass(frozen=True)
class PathEntry:
    """Delays (s) and complex amplitudes for one (rx, antenna, time) slice."""

    delays: np.ndarray
    amplitudes: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.delays.shape[0]


@dataclass(frozen=True)
class RFScene:
    """Static deployment: devices, scatterers, radio parameters, noise model."""

    layout: DeviceLayout
    static_scatterers: tuple = ()
    carrier_freq: float = 5.2e9
    bandwidth: float = 20e6
    n_subcarriers: int = 57
    sample_rate: float = 810.0
    n_antennas: int = 3
    antenna_axis: tuple = (0.0, 1.0, 0.0)
    antenna_spacing: float | None = None  # defaults to half a carrier wavelength
    antenna_gains: np.ndarray | None = None  # (n_rx, n_antennas) complex
    joint_reflectivity: complex = 1.0 + 0.0j
    noise_std: float = 0.0
    drift_step_std: float = 0.0

    def __post_init__(self):
        if self.carrier_freq <= 0.0 or self.sample_rate <= 0.0:
            raise RfSimError("carrier_freq and sample_rate must be > 0")
        if self.n_subcarriers < 1:
            raise RfSimError("need at least one subcarrier")
        if self.n_antennas < 2:
            raise RfSimError("CSI ratio preprocessing needs at least 2 antennas per RX")
        if self.noise_std < 0.0 or self.drift_step_std < 0.0:
            raise RfSimError("noise parameters must be >= 0")
        gains = self.antenna_gains
        if gains is None:
            gains = np.ones((self.layout.n_receivers, self.n_antennas), dtype=complex)
        else:
            gains = np.asarray(gains, dtype=complex)
            if gains.shape != (self.layout.n_receivers, self.n_antennas):
                raise RfSimError("antenna_gains must be (n_rx, n_antennas)")
        object.__setattr__(self, "antenna_gains", gains)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def subcarrier_freqs(self) -> np.ndarray:
        if self.n_subcarriers == 1:
            return np.array([self.carrier_freq])
        return np.linspace(self.carrier_freq - self.bandwidth / 2.0,
                           self.carrier_freq + self.bandwidth / 2.0,
                           self.n_subcarriers)

    @property
    def antenna_offsets(self) -> np.ndarray:
        axis = np.asarray(self.antenna_axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        spacing = self.antenna_spacing if self.antenna_spacing is not None else self.wavelength / 2.0
        idx = np.arange(self.n_antennas) - (self.n_antennas - 1) / 2.0
        return idx[:, None] * spacing * axis[None, :]

    def antenna_position(self, rx_index: int, antenna_index: int) -> np.ndarray:
        return np.asarray(self.layout.rxs[rx_index]) + self.antenna_offsets[antenna_index]


# ---------------------------------------------------------------------------
# Skeleton motion


def _unit(vec):
    vec = np.asarray(vec, dtype=float)
    return vec / np.linalg.norm(vec)


def _arm_dir(elev, lateral, side):
    """Unit direction of a limb segment.

    elev: angle from straight down (0 = hanging, pi/2 = horizontal, pi = up).
    lateral: 0 raises in the sagittal (forward) plane, pi/2 in the coronal.
    side: +1 for the left limb, -1 for the right.
    """
    out = np.array([
        math.sin(elev) * math.cos(lateral),
        side * math.sin(elev) * math.sin(lateral),
        -math.cos(elev),
    ])
    return out


def _build_frame(root, yaw, torso_pitch, arm_l, arm_r, knee_l, knee_r, leg_spread):
    """Assemble one 17-joint pose from angle parameters; bone lengths are fixed."""
    fwd = np.array([1.0, 0.0, 0.0])
    left = np.array([0.0, 1.0, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    torso = _unit(math.cos(torso_pitch) * up + math.sin(torso_pitch) * fwd)
    head_fwd = _unit(math.cos(torso_pitch) * fwd - math.sin(torso_pitch) * up)

    j = np.zeros((N_JOINTS, 3))
    pelvis = np.zeros(3)
    j[0] = pelvis
    j[1] = spine = pelvis + 0.25 * torso
    j[2] = neck = spine + 0.25 * torso
    j[3] = head = neck + 0.12 * torso
    j[4] = head + 0.09 * head_fwd

    shoulder_dir_l = _unit(left - 0.1 * torso)
    shoulder_dir_r = _unit(-left - 0.1 * torso)
    j[5] = sh_l = neck + 0.19 * shoulder_dir_l
    j[8] = sh_r = neck + 0.19 * shoulder_dir_r
    d_ua_l = _arm_dir(arm_l[0], arm_l[1], +1.0)
    d_ua_r = _arm_dir(arm_r[0], arm_r[1], -1.0)
    j[6] = el_l = sh_l + 0.28 * d_ua_l
    j[9] = el_r = sh_r + 0.28 * d_ua_r
    d_fa_l = _arm_dir(arm_l[0] + arm_l[2], arm_l[1], +1.0)
    d_fa_r = _arm_dir(arm_r[0] + arm_r[2], arm_r[1], -1.0)
    j[7] = el_l + 0.26 * d_fa_l
    j[10] = el_r + 0.26 * d_fa_r

    j[11] = hip_l = pelvis + 0.10 * left
    j[14] = hip_r = pelvis - 0.10 * left
    d_th_l = _unit(np.array([math.sin(knee_l[0]), math.sin(leg_spread), -math.cos(knee_l[0])]))
    d_th_r = _unit(np.array([math.sin(knee_r[0]), -math.sin(leg_spread), -math.cos(knee_r[0])]))
    j[12] = kn_l = hip_l + 0.42 * d_th_l
    j[15] = kn_r = hip_r + 0.42 * d_th_r
    d_sh_l = _unit(np.array([math.sin(knee_l[0] - knee_l[1]), math.sin(leg_spread), -math.cos(knee_l[0] - knee_l[1])]))
    d_sh_r = _unit(np.array([math.sin(knee_r[0] - knee_r[1]), -math.sin(leg_spread), -math.cos(knee_r[0] - knee_r[1])]))
    j[13] = kn_l + 0.40 * d_sh_l
    j[16] = kn_r + 0.40 * d_sh_r

    if yaw != 0.0:
        j = j @ rotation_about_axis(up, yaw).T
    return j + np.asarray(root)


def generate_motion(action: str, duration: float, frame_rate: float,
                    base_position=(0.0, 0.0, 0.0), orientation: float = 0.0,
                    seed: int = 0) -> SkeletonTrajectory:
    """Periodic 17-joint motion for one of the 18 supported action labels.

    Deterministic for a fixed seed (the seed jitters phase and tempo).  The
    whole body is rigidly placed at ``base_position`` facing ``orientation``
    radians about +z.  Pelvis rest height is 0.95 m above the base.
    """
    if action not in ACTIONS:
        raise UnknownAction(f"unknown action {action!r}")
    n = int(round(duration * frame_rate))
    if n <= 0:
        raise RfSimError("duration must cover at least one frame")
    rng = substream(seed, _STREAM_MOTION)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    freq = 0.5 * (1.0 + 0.2 * rng.uniform(-1.0, 1.0))
    amp = 1.0 + 0.1 * rng.uniform(-1.0, 1.0)

    t = np.arange(n) / frame_rate
    ph = 2.0 * math.pi * freq * t + phase0
    osc = 0.5 * (1.0 - np.cos(ph))  # 0..1 cycle
    swing = np.sin(ph)

    frames = np.empty((n, N_JOINTS, 3))
    for i in range(n):
        o = float(osc[i]) * amp
        s = float(swing[i]) * amp
        root = np.array([0.0, 0.0, 0.95])
        yaw = 0.0
        pitch = 0.05 * s
        arm_l = [0.15 + 0.05 * s, 0.0, 0.2]   # (elev, lateral, elbow bend)
        arm_r = [0.15 - 0.05 * s, 0.0, 0.2]
        knee_l = [0.05, 0.1]                  # (thigh swing, knee bend)
        knee_r = [0.05, 0.1]
        spread = 0.0

        if action == "left_arm_stretch":
            arm_l = [0.15 + 1.25 * o, 0.0, 0.1]
        elif action == "right_arm_stretch":
            arm_r = [0.15 + 1.25 * o, 0.0, 0.1]
        elif action == "both_arms_stretch":
            arm_l = [0.15 + 1.25 * o, 0.0, 0.1]
            arm_r = [0.15 + 1.25 * o, 0.0, 0.1]
        elif action == "left_lateral_raise":
            arm_l = [0.15 + 1.25 * o, math.pi / 2.0, 0.05]
        elif action == "right_lateral_raise":
            arm_r = [0.15 + 1.25 * o, math.pi / 2.0, 0.05]
        elif action == "left_forward_lunge":
            root += np.array([0.35 * o, 0.0, -0.18 * o])
            knee_l = [0.9 * o, 1.2 * o]
            knee_r = [-0.5 * o, 0.3 * o]
        elif action == "right_forward_lunge":
            root += np.array([0.35 * o, 0.0, -0.18 * o])
            knee_r = [0.9 * o, 1.2 * o]
            knee_l = [-0.5 * o, 0.3 * o]
        elif action == "left_side_lunge":
            root += np.array([0.0, 0.3 * o, -0.15 * o])
            spread = 0.5 * o
            knee_l = [0.05, 0.9 * o]
        elif action == "right_side_lunge":
            root += np.array([0.0, -0.3 * o, -0.15 * o])
            spread = 0.5 * o
            knee_r = [0.05, 0.9 * o]
        elif action == "jump":
            bump = max(s, 0.0)
            crouch = max(-s, 0.0)
            root += np.array([0.0, 0.0, 0.3 * bump - 0.2 * crouch])
            knee_l = [0.05, 0.9 * crouch + 0.3 * bump]
            knee_r = [0.05, 0.9 * crouch + 0.3 * bump]
            arm_l = [0.3 + 1.0 * bump, math.pi / 2.0, 0.1]
            arm_r = [0.3 + 1.0 * bump, math.pi / 2.0, 0.1]
        elif action == "pick_up":
            pitch = 1.1 * o
            root += np.array([0.0, 0.0, -0.25 * o])
            knee_l = [0.2 * o, 0.8 * o]
            knee_r = [0.2 * o, 0.8 * o]
            arm_l = [0.6 * o + 0.15, 0.0, 0.1]
            arm_r = [0.6 * o + 0.15, 0.0, 0.1]
        elif action == "clockwise_spin":
            yaw = -2.0 * math.pi * freq * t[i] - phase0
        elif action == "counterclockwise_spin":
            yaw = 2.0 * math.pi * freq * t[i] + phase0
        elif action == "jumping_jack":
            arm_l = [0.15 + 2.6 * o, math.pi / 2.0, 0.05]
            arm_r = [0.15 + 2.6 * o, math.pi / 2.0, 0.05]
            spread = 0.45 * o
            root += np.array([0.0, 0.0, 0.06 * float(np.abs(swing[i]))])
        elif action == "squat":
            root += np.array([0.0, 0.0, -0.35 * o])
            knee_l = [0.15 * o, 1.5 * o]
            knee_r = [0.15 * o, 1.5 * o]
            arm_l = [0.15 + 1.3 * o, 0.0, 0.05]
            arm_r = [0.15 + 1.3 * o, 0.0, 0.05]
        elif action == "left_rotation":
            yaw = 0.8 * o
        elif action == "right_rotation":
            yaw = -0.8 * o
        elif action == "directional_hops":
            leg = int((ph[i] / (2.0 * math.pi)) % 4.0)
            direction = [np.array([0.25, 0.0, 0.0]), np.array([0.0, 0.25, 0.0]),
                         np.array([-0.25, 0.0, 0.0]), np.array([0.0, -0.25, 0.0])][leg]
            bump = float(np.abs(swing[i]))
            root += direction * o + np.array([0.0, 0.0, 0.12 * bump])
            knee_l = [0.05, 0.5 * (1.0 - bump)]
            knee_r = [0.05, 0.5 * (1.0 - bump)]

        frames[i] = _build_frame(root, yaw, pitch, arm_l, arm_r, knee_l, knee_r, spread)

    rot = rotation_about_axis([0.0, 0.0, 1.0], orientation)
    frames = frames @ rot.T + np.asarray(base_position, dtype=float)
    return SkeletonTrajectory(frames, frame_rate, action=action)


# ---------------------------------------------------------------------------
# Path enumeration and CSI synthesis

_BOUNCE_GUARD = 1e-9  # reject bounce points collapsing onto a device


def path_params(scene: RFScene, skeleton_frame, rx_index: int, antenna_index: int) -> PathEntry:
    """Delays and amplitudes of all propagation paths for one antenna and pose.

    Paths are the line of sight plus one single-bounce path per static
    scatterer and per skeleton joint; bounce points coinciding with a device
    are dropped.  ``skeleton_frame`` is a (J, 3) array (J may be 0).
    """
    if not (0 <= rx_index < scene.layout.n_receivers):
        raise RfSimError(f"rx_index {rx_index} out of range")
    if not (0 <= antenna_index < scene.n_antennas):
        raise RfSimError(f"antenna_index {antenna_index} out of range")
    tx = np.asarray(scene.layout.tx)
    ant = scene.antenna_position(rx_index, antenna_index)
    delays = [np.linalg.norm(tx - ant) / SPEED_OF_LIGHT]
    amps = [1.0 / (4.0 * math.pi * np.linalg.norm(tx - ant)) + 0.0j]
    bounces = [(np.asarray(pos, dtype=float), complex(refl)) for pos, refl in scene.static_scatterers]
    skeleton_frame = np.asarray(skeleton_frame, dtype=float).reshape(-1, 3)
    bounces.extend((q, complex(scene.joint_reflectivity)) for q in skeleton_frame)
    for q, refl in bounces:
        d1 = float(np.linalg.norm(tx - q))
        d2 = float(np.linalg.norm(q - ant))
        if d1 < _BOUNCE_GUARD or d2 < _BOUNCE_GUARD:
            continue
        delays.append((d1 + d2) / SPEED_OF_LIGHT)
        amps.append(refl / (4.0 * math.pi * d1 * d2))
    return PathEntry(np.asarray(delays), np.asarray(amps, dtype=complex))


def _interp_frames(trajectory: SkeletonTrajectory, csi_times: np.ndarray) -> np.ndarray:
    """Linearly interpolate joint positions to CSI timestamps -> (N_c, J, 3)."""
    n, j, _ = trajectory.frames.shape
    if j == 0:
        return np.zeros((csi_times.shape[0], 0, 3))
    frame_times = np.arange(n) / trajectory.frame_rate
    flat = trajectory.frames.reshape(n, -1)
    out = np.empty((csi_times.shape[0], flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.interp(csi_times, frame_times, flat[:, k])
    return out.reshape(-1, j, 3)


def synth_csi(scene: RFScene, trajectory: SkeletonTrajectory, seed: int = 0,
              time_chunk: int = 512) -> list:
    """Simulate CSI for every receiver; returns one CsiTensor (A, M, N_c) per RX.

    The CSI sample rate must be an integer multiple of the trajectory frame
    rate.  All randomness (drift, noise) is drawn from substreams keyed by
    (seed, purpose, receiver, frame) so results do not depend on evaluation
    order.
    """
    ratio = scene.sample_rate / trajectory.frame_rate
    if scene.sample_rate < trajectory.frame_rate or abs(ratio - round(ratio)) > 1e-9:
        raise RateMismatch(
            f"sample_rate {scene.sample_rate} must be an integer multiple of frame_rate {trajectory.frame_rate}")
    ratio = int(round(ratio))
    n_frames = trajectory.n_frames
    n_csi = n_frames * ratio
    csi_times = np.arange(n_csi) / scene.sample_rate
    joints_t = _interp_frames(trajectory, csi_times)  # (N_c, J, 3)
    freqs = scene.subcarrier_freqs
    tx = np.asarray(scene.layout.tx)

    d_tx_joint = None
    if joints_t.shape[1] > 0:
        d_tx_joint = np.linalg.norm(joints_t - tx[None, None, :], axis=2)  # (N_c, J)

    out = []
    for rx_i in range(scene.layout.n_receivers):
        data = np.empty((scene.n_antennas, scene.n_subcarriers, n_csi), dtype=complex)
        for ant_i in range(scene.n_antennas):
            ant = scene.antenna_position(rx_i, ant_i)
            h = np.zeros((scene.n_subcarriers, n_csi), dtype=complex)
            # Static paths (LOS + scatterers) share one delay per path.
            static = path_params(scene, np.zeros((0, 3)), rx_i, ant_i)
            h += (static.amplitudes[None, :] * np.exp(
                -2j * math.pi * freqs[:, None] * static.delays[None, :])).sum(axis=1)[:, None]
            if joints_t.shape[1] > 0:
                d2 = np.linalg.norm(joints_t - ant[None, None, :], axis=2)  # (N_c, J)
                keep = (d_tx_joint > _BOUNCE_GUARD) & (d2 > _BOUNCE_GUARD)
                tau = (d_tx_joint + d2) / SPEED_OF_LIGHT
                amp = np.where(keep, scene.joint_reflectivity / (4.0 * math.pi * d_tx_joint * d2), 0.0)
                for s in range(0, n_csi, time_chunk):
                    e = slice(s, min(s + time_chunk, n_csi))
                    phase = np.exp(-2j * math.pi * freqs[:, None, None] * tau[None, e, :])
                    h[:, e] += (amp[None, e, :] * phase).sum(axis=2)
            data[ant_i] = h
        if scene.drift_step_std > 0.0:
            steps = np.concatenate([
                substream(seed, _STREAM_DRIFT, rx_i, f).normal(0.0, scene.drift_step_std, ratio)
                for f in range(n_frames)])
            data *= np.exp(1j * np.cumsum(steps))[None, None, :]
        data *= scene.antenna_gains[rx_i][:, None, None]
        if scene.noise_std > 0.0:
            scale = scene.noise_std / math.sqrt(2.0)
            noise = np.concatenate([
                substream(seed, _STREAM_NOISE, rx_i, f).normal(
                    0.0, scale, (2, scene.n_antennas, scene.n_subcarriers, ratio))
                for f in range(n_frames)], axis=3)
            data += noise[0] + 1j * noise[1]
        out.append(CsiTensor(data, scene.sample_rate, freqs))
    return out


def perturb_layout(layout: DeviceLayout, sigma: float, seed: int = 0, max_tries: int = 100) -> DeviceLayout:
    """Offset every device coordinate by isotropic Gaussian noise of std ``sigma``.

    Draws are redrawn wholesale if a perturbation collapses a TX-RX pair
    onto itself (relevant only for sigma on the order of the separation).
    """
    if sigma < 0.0:
        raise RfSimError("sigma must be >= 0")
    rng = substream(seed, _STREAM_PERTURB)
    n = layout.n_receivers
    for _ in range(max_tries):
        noise = rng.normal(0.0, sigma, (n + 1, 3)) if sigma > 0.0 else np.zeros((n + 1, 3))
        try:
            return DeviceLayout(
                tx=np.asarray(layout.tx) + noise[0],
                rxs=tuple(np.asarray(r) + noise[1 + i] for i, r in enumerate(layout.rxs)),
                provenance=layout.provenance + (f"perturbed sigma={sigma}",),
            )
        except ValueError:
            continue
    raise RfSimError(f"could not draw a valid perturbation after {max_tries} tries")
