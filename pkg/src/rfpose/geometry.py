"""SE(3) algebra, camera projection/triangulation, and checkerboard-chain coordinate unification.

Conventions used throughout:

* A rigid transform stores a 3x3 rotation ``R`` and a translation ``t`` and
  acts on points as ``p' = R p + t``; its homogeneous 4x4 form has bottom row
  ``(0, 0, 0, 1)``.
* ``CameraModel.world_to_cam`` maps world points into camera coordinates
  (``X_c = R X_w + t``), i.e. it is the classic extrinsic block.
* Board calibration transforms (as returned by :func:`solve_pnp`) map the
  board's own coordinates into camera coordinates.  The unification chain
  ``chain_unify(cam_from_world_board, cam_from_aux_board)`` therefore maps
  aux-board coordinates into world-board coordinates via the camera.

All positions are in meters, pixels in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_INPUT_TOL = 1e-6
_ORTHO_FINAL_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometry failures."""


class NonRotation(GeometryError):
    """Matrix is not (close to) a proper rotation."""


class NonPositive(GeometryError):
    """A length/measurement that must be > 0 was not."""


class BehindCamera(GeometryError):
    """Point has non-positive depth after the extrinsic transform."""


class Degenerate(GeometryError):
    """Correspondence set is insufficient or geometrically degenerate."""


class NoConvergence(GeometryError):
    """Iterative refinement failed to converge."""


class Underdetermined(GeometryError):
    """Fewer observations than the problem requires."""


class IllConditioned(GeometryError):
    """Observation geometry is too close to singular (e.g. parallel rays)."""


class InconsistentTX(GeometryError):
    """Multiple calibration pairs disagree about the transmitter position."""


def _orthonormality_residual(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element: rotation (3x3, proper orthonormal) plus translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise GeometryError(f"expected 4x4 homogeneous matrix, got {matrix.shape}")
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise GeometryError("bottom row of a homogeneous transform must be (0,0,0,1)")
        return make_transform(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass(frozen=True)
class HomogeneousPoint:
    """A 4-vector point with w normalized to exactly 1."""

    coords: np.ndarray

    @staticmethod
    def from_point(p) -> "HomogeneousPoint":
        p = np.asarray(p, dtype=float).reshape(3)
        return HomogeneousPoint(np.array([p[0], p[1], p[2], 1.0]))

    @staticmethod
    def from_coords(coords) -> "HomogeneousPoint":
        coords = np.asarray(coords, dtype=float).reshape(4)
        if coords[3] == 0.0:
            raise GeometryError("homogeneous point at infinity (w = 0)")
        if coords[3] != 1.0:
            coords = coords / coords[3]
            coords[3] = 1.0
        return HomogeneousPoint(coords)

    def to_point(self) -> np.ndarray:
        return self.coords[:3].copy()


def make_transform(rotation, translation) -> RigidTransform:
    """Build a RigidTransform, re-orthonormalizing the rotation via polar decomposition.

    Inputs within 1e-6 of orthonormal are snapped to the nearest rotation
    (final residual below 1e-9); reflections and badly conditioned inputs
    raise :class:`NonRotation`.
    """
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float).reshape(3)
    if rotation.shape != (3, 3):
        raise NonRotation(f"rotation must be 3x3, got {rotation.shape}")
    if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
        raise GeometryError("non-finite values in transform")
    residual = _orthonormality_residual(rotation)
    if residual > _ORTHO_INPUT_TOL:
        raise NonRotation(f"orthonormality residual {residual:.3e} exceeds {_ORTHO_INPUT_TOL}")
    if np.linalg.det(rotation) < 0.0:
        raise NonRotation("determinant is negative (reflection, not a rotation)")
    u, _, vt = np.linalg.svd(rotation)
    nearest = u @ vt
    if np.linalg.det(nearest) < 0.0:
        # Flip the axis of least significance; unreachable for inputs that
        # passed the det > 0 check but kept as a safety net.
        u[:, -1] = -u[:, -1]
        nearest = u @ vt
    final = _orthonormality_residual(nearest)
    if final > _ORTHO_FINAL_TOL:
        raise NonRotation(f"re-orthonormalization left residual {final:.3e}")
    return RigidTransform(nearest, translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt, -rt @ a.translation)


def apply(a: RigidTransform, p) -> np.ndarray:
    """Apply the transform to one point (3,) or a batch (N, 3)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return a.rotation @ p + a.translation
    return p @ a.rotation.T + a.translation


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit-normalized axis and angle in radians."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise GeometryError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_from_rodrigues(rvec) -> np.ndarray:
    rvec = np.asarray(rvec, dtype=float).reshape(3)
    angle = np.linalg.norm(rvec)
    if angle < 1e-12:
        k = np.array([[0.0, -rvec[2], rvec[1]], [rvec[2], 0.0, -rvec[0]], [-rvec[1], rvec[0], 0.0]])
        return np.eye(3) + k  # first-order term is exact enough below 1e-12
    return rotation_about_axis(rvec, angle)


def rodrigues_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_rodrigues` (angle in [0, pi])."""
    trace = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(trace)
    if angle < 1e-12:
        return np.zeros(3)
    if math.pi - angle < 1e-6:
        # Near pi: extract the axis from R + I.
        m = (rotation + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        # Fix signs from off-diagonal terms, anchored on the largest entry.
        i = int(np.argmax(axis))
        for j in range(3):
            if j != i and m[i, j] < 0.0:
                axis[j] = -axis[j]
        axis /= np.linalg.norm(axis)
        return axis * angle
    axis = np.array([
        rotation[2, 1] - rotation[1, 2],
        rotation[0, 2] - rotation[2, 0],
        rotation[1, 0] - rotation[0, 1],
    ]) / (2.0 * math.sin(angle))
    return axis * angle


# ---------------------------------------------------------------------------
# Device layout and the checkerboard chain


@dataclass(frozen=True)
class DistanceMeasurement:
    """An inter-device distance, measured directly, in board squares, or in pixels.

    mode        one of {"direct", "grid", "pixel"}
    value       S in meters (direct), g in squares (grid), p in pixels (pixel)
    square_size d in meters, required for grid mode
    scale       rho in meters/pixel, required for pixel mode
    """

    mode: str
    value: float
    square_size: float | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.mode not in ("direct", "grid", "pixel"):
            raise GeometryError(f"unknown measurement mode {self.mode!r}")
        if self.value <= 0.0:
            raise NonPositive("measurement value must be > 0")
        if self.mode == "grid":
            if self.square_size is None or self.square_size <= 0.0:
                raise NonPositive("grid mode needs square_size > 0")
        if self.mode == "pixel":
            if self.scale is None or self.scale <= 0.0:
                raise NonPositive("pixel mode needs scale > 0")


def half_distance(m: DistanceMeasurement) -> float:
    """Half of the TX-RX separation: S/2, g*d/2, or p*rho/2 depending on mode."""
    if m.mode == "direct":
        s = m.value
    elif m.mode == "grid":
        s = m.value * m.square_size
    else:
        s = m.value * m.scale
    return s * 0.5


def device_offsets(half: float) -> tuple[np.ndarray, np.ndarray]:
    """TX/RX coordinates in the aux-board frame: (-L, 0, 0) and (L, 0, 0)."""
    if half <= 0.0:
        raise NonPositive("half-distance must be > 0")
    return np.array([-half, 0.0, 0.0]), np.array([half, 0.0, 0.0])


def chain_unify(cam_from_world: RigidTransform, cam_from_aux: RigidTransform) -> RigidTransform:
    """Map aux-board coordinates to world-board coordinates through the shared camera.

    Both arguments map their board's coordinates into the camera frame; the
    result is invert(cam_from_world) composed with cam_from_aux.
    """
    return compose(invert(cam_from_world), cam_from_aux)


@dataclass(frozen=True)
class DeviceLayout:
    """Calibrated transmitter/receiver world positions for one deployment."""

    tx: np.ndarray
    rxs: tuple
    provenance: tuple = ()
    min_separation: float = 1e-9

    def __post_init__(self):
        tx = np.asarray(self.tx, dtype=float).reshape(3)
        rxs = tuple(np.asarray(r, dtype=float).reshape(3) for r in self.rxs)
        if len(rxs) == 0:
            raise GeometryError("layout needs at least one receiver")
        if not np.all(np.isfinite(tx)) or not all(np.all(np.isfinite(r)) for r in rxs):
            raise GeometryError("non-finite device coordinates")
        for r in rxs:
            if np.linalg.norm(tx - r) <= self.min_separation:
                raise GeometryError("co-located TX/RX pair rejected")
        object.__setattr__(self, "tx", tx)
        object.__setattr__(self, "rxs", rxs)

    @property
    def n_receivers(self) -> int:
        return len(self.rxs)

    def rx_offsets(self) -> np.ndarray:
        """Receiver positions relative to the transmitter, shape (n_rx, 3)."""
        return np.stack([r - self.tx for r in self.rxs])


def unify_layout(pairs, tx_merge_tol: float = 1e-3, tx_inconsistency_tol: float = 0.05) -> DeviceLayout:
    """Unify per-pair board calibrations into one world-frame device layout.

    ``pairs`` is a list of (cam_from_world, cam_from_aux, DistanceMeasurement)
    triples, one per TX-RX pair.  Each pair contributes one TX and one RX
    estimate; TX estimates are averaged, and estimates spreading wider than
    ``tx_inconsistency_tol`` raise :class:`InconsistentTX`.
    """
    if len(pairs) == 0:
        raise GeometryError("need at least one calibration pair")
    tx_estimates = []
    rxs = []
    provenance = []
    for i, (cam_from_world, cam_from_aux, measurement) in enumerate(pairs):
        half = half_distance(measurement)
        p_t, p_r = device_offsets(half)
        aux_to_world = chain_unify(cam_from_world, cam_from_aux)
        tx_estimates.append(apply(aux_to_world, p_t))
        rxs.append(apply(aux_to_world, p_r))
        provenance.append(f"pair{i}")
    tx_estimates = np.stack(tx_estimates)
    spread = 0.0
    for i in range(len(tx_estimates)):
        for j in range(i + 1, len(tx_estimates)):
            spread = max(spread, float(np.linalg.norm(tx_estimates[i] - tx_estimates[j])))
    if spread > tx_inconsistency_tol:
        raise InconsistentTX(f"TX estimates spread {spread * 100:.2f} cm > {tx_inconsistency_tol * 100:.1f} cm")
    if spread > tx_merge_tol:
        provenance.append(f"tx-spread {spread * 1000:.3f} mm averaged")
    tx = tx_estimates.mean(axis=0)
    return DeviceLayout(tx=tx, rxs=tuple(rxs), provenance=tuple(provenance))


# ---------------------------------------------------------------------------
# Camera model, PnP, triangulation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with Brown-Conrady distortion (k1, k2, p1, p2)."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    distortion: tuple = (0.0, 0.0, 0.0, 0.0)
    world_to_cam: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise GeometryError("focal lengths must be > 0")
        if len(self.distortion) != 4:
            raise GeometryError("distortion must be (k1, k2, p1, p2)")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, self.skew, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


def distort_normalized(xy: np.ndarray, distortion) -> np.ndarray:
    """Apply Brown-Conrady distortion to normalized image coordinates (..., 2)."""
    k1, k2, p1, p2 = distortion
    x = xy[..., 0]
    y = xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort_normalized(xy: np.ndarray, distortion, iterations: int = 20) -> np.ndarray:
    """Invert the distortion by fixed-point iteration on normalized coordinates."""
    out = xy.copy()
    for _ in range(iterations):
        d = distort_normalized(out, distortion)
        out = out + (xy - d)
    return out


def project(cam: CameraModel, point_world) -> np.ndarray:
    """Project a world point to pixel coordinates, distortion included."""
    x_c = apply(cam.world_to_cam, np.asarray(point_world, dtype=float))
    if x_c[2] <= 1e-9:
        raise BehindCamera(f"depth {x_c[2]:.3e} is not positive")
    xy = x_c[:2] / x_c[2]
    xd, yd = distort_normalized(xy, cam.distortion)
    return np.array([cam.fx * xd + cam.skew * yd + cam.cx, cam.fy * yd + cam.cy])


def _pixels_to_normalized(cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    yd = (pixels[..., 1] - cam.cy) / cam.fy
    xd = (pixels[..., 0] - cam.cx - cam.skew * yd) / cam.fx
    return undistort_normalized(np.stack([xd, yd], axis=-1), cam.distortion)


@dataclass(frozen=True)
class PnPResult:
    cam_from_board: RigidTransform
    reprojection_rms: float
    iterations: int


def _planar_pnp_init(points: np.ndarray, norm_xy: np.ndarray) -> RigidTransform:
    """Homography-based pose init for coplanar boards (plane fitted by SVD)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, vt = np.linalg.svd(centered)
    basis = vt[:2]  # in-plane axes
    uv = centered @ basis.T
    a = []
    for (u, v), (x, y) in zip(uv, norm_xy):
        a.append([u, v, 1, 0, 0, 0, -x * u, -x * v, -x])
        a.append([0, 0, 0, u, v, 1, -y * u, -y * v, -y])
    a = np.asarray(a)
    _, _, vh = np.linalg.svd(a)
    h = vh[-1].reshape(3, 3)
    scale = math.sqrt(np.linalg.norm(h[:, 0]) * np.linalg.norm(h[:, 1]))
    if scale < 1e-12:
        raise Degenerate("homography collapsed")
    h = h / scale
    if h[2, 2] < 0.0:  # keep the board in front of the camera
        h = -h
    r1, r2, t = h[:, 0], h[:, 1], h[:, 2]
    r3 = np.cross(r1, r2)
    r_plane = np.stack([r1, r2, r3], axis=1)
    u, _, vt2 = np.linalg.svd(r_plane)
    r_plane = u @ vt2
    if np.linalg.det(r_plane) < 0.0:
        u[:, -1] = -u[:, -1]
        r_plane = u @ vt2
    # Rotation acting on full 3D board coords: plane basis then r_plane.
    basis3 = np.vstack([basis, np.cross(basis[0], basis[1])])
    rotation = r_plane @ basis3
    translation = t - rotation @ centroid
    return make_transform(rotation, translation)


def _dlt_pnp_init(points: np.ndarray, norm_xy: np.ndarray) -> RigidTransform:
    a = []
    for (px, py, pz), (x, y) in zip(points, norm_xy):
        a.append([px, py, pz, 1, 0, 0, 0, 0, -x * px, -x * py, -x * pz, -x])
        a.append([0, 0, 0, 0, px, py, pz, 1, -y * px, -y * py, -y * pz, -y])
    a = np.asarray(a)
    _, _, vh = np.linalg.svd(a)
    p = vh[-1].reshape(3, 4)
    m = p[:, :3]
    scale = np.linalg.det(m)
    if abs(scale) < 1e-15:
        raise Degenerate("DLT camera matrix is singular")
    p = p * (np.sign(scale) / abs(scale) ** (1.0 / 3.0))
    u, _, vt = np.linalg.svd(p[:, :3])
    rotation = u @ vt
    if np.linalg.det(rotation) < 0.0:
        u[:, -1] = -u[:, -1]
        rotation = u @ vt
    return make_transform(rotation, p[:, 3])


def _reprojection_residuals(cam: CameraModel, transform: RigidTransform, points, pixels) -> np.ndarray:
    cam_posed = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, cam.skew, cam.distortion, transform)
    res = np.empty((len(points), 2))
    for i, (p, obs) in enumerate(zip(points, pixels)):
        res[i] = project(cam_posed, p) - obs
    return res.ravel()


def solve_pnp(correspondences, cam: CameraModel, max_iterations: int = 50, step_tol: float = 1e-12) -> PnPResult:
    """Estimate the board-to-camera transform from 3D-2D correspondences.

    DLT initialization (homography route for coplanar boards) followed by
    Gauss-Newton refinement of the pixel reprojection error.  Requires at
    least 6 non-collinear correspondences.
    """
    points = np.asarray([c[0] for c in correspondences], dtype=float)
    pixels = np.asarray([c[1] for c in correspondences], dtype=float)
    if len(points) < 6:
        raise Degenerate(f"need >= 6 correspondences, got {len(points)}")
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-9 * max(svals[0], 1e-30):
        raise Degenerate("correspondences are collinear")
    norm_xy = _pixels_to_normalized(cam, pixels)
    planar = svals[2] < 1e-9 * svals[0]
    if planar:
        transform = _planar_pnp_init(points, norm_xy)
    else:
        transform = _dlt_pnp_init(points, norm_xy)

    # Gauss-Newton on (rodrigues, translation) with a numeric Jacobian.
    theta = np.concatenate([rodrigues_from_rotation(transform.rotation), transform.translation])

    def residuals(th):
        t = RigidTransform(rotation_from_rodrigues(th[:3]), th[3:])
        return _reprojection_residuals(cam, t, points, pixels)

    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        r0 = residuals(theta)
        jac = np.empty((r0.size, 6))
        h = 1e-7
        for k in range(6):
            dp = np.zeros(6)
            dp[k] = h
            jac[:, k] = (residuals(theta + dp) - residuals(theta - dp)) / (2.0 * h)
        jtj = jac.T @ jac
        jtr = jac.T @ r0
        try:
            step = np.linalg.solve(jtj + 1e-12 * np.eye(6), -jtr)
        except np.linalg.LinAlgError as exc:
            raise Degenerate("normal equations singular during refinement") from exc
        theta = theta + step
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
    if not converged and np.linalg.norm(step) > 1e-6:
        raise NoConvergence(f"Gauss-Newton step {np.linalg.norm(step):.3e} after {max_iterations} iterations")
    final = make_transform(rotation_from_rodrigues(theta[:3]), theta[3:])
    rms = float(np.sqrt(np.mean(residuals(theta) ** 2)))
    return PnPResult(final, rms, it)


def triangulate(views, refine: bool = True, min_ray_angle_deg: float = 0.5,
                max_iterations: int = 20, step_tol: float = 1e-10) -> np.ndarray:
    """Triangulate one 3D point from >= 2 (CameraModel, pixel) observations.

    Linear DLT on normalized rays plus optional Gauss-Newton reprojection
    refinement.  Raises Underdetermined (< 2 views) or IllConditioned when
    all ray pairs subtend less than ``min_ray_angle_deg``.
    """
    if len(views) < 2:
        raise Underdetermined(f"triangulation needs >= 2 views, got {len(views)}")
    rays = []
    centers = []
    rows = []
    for cam, pixel in views:
        xy = _pixels_to_normalized(cam, np.asarray(pixel, dtype=float).reshape(2))
        r = cam.world_to_cam.rotation
        t = cam.world_to_cam.translation
        p = np.hstack([r, t[:, None]])  # normalized projection matrix
        rows.append(xy[0] * p[2] - p[0])
        rows.append(xy[1] * p[2] - p[1])
        direction = r.T @ np.array([xy[0], xy[1], 1.0])
        rays.append(direction / np.linalg.norm(direction))
        centers.append(-r.T @ t)
    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            cosang = np.clip(abs(float(np.dot(rays[i], rays[j]))), 0.0, 1.0)
            max_angle = max(max_angle, math.degrees(math.acos(cosang)))
    if max_angle < min_ray_angle_deg:
        raise IllConditioned(f"max ray angle {max_angle:.4f} deg < {min_ray_angle_deg} deg")
    a = np.asarray(rows)
    _, _, vh = np.linalg.svd(a)
    hom = vh[-1]
    if abs(hom[3]) < 1e-15:
        raise IllConditioned("triangulated point at infinity")
    point = hom[:3] / hom[3]
    if not refine:
        return point

    def residuals(x):
        res = []
        for cam, pixel in views:
            res.append(project(cam, x) - np.asarray(pixel, dtype=float))
        return np.concatenate(res)

    for _ in range(max_iterations):
        r0 = residuals(point)
        jac = np.empty((r0.size, 3))
        h = 1e-7
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            jac[:, k] = (residuals(point + dp) - residuals(point - dp)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac.T @ jac + 1e-12 * np.eye(3), -(jac.T @ r0))
        except np.linalg.LinAlgError:
            break
        point = point + step
        if np.linalg.norm(step) < step_tol:
            break
    return point
