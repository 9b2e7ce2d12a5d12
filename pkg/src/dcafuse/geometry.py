"""Camera rigs, homogeneous projection, and calibration disturbance.

COORDINATE CONVENTIONS
======================
World frame: meters, right-handed, z up.
Camera frame: x right, y down, z forward (optical axis).
Projection: each camera carries a 3x4 matrix ``proj`` acting on homogeneous
3D points, ``u = proj @ (x, y, z, 1)``; pixel coordinates are
``(u[0]/u[2], u[1]/u[2])`` with u horizontal and v vertical, origin at the
top-left image corner. Reference coordinates are pixels divided by
``(width_px, height_px)``, so they live in [0, 1]^2 and are identical for
every pyramid stride.

A point is a valid reference in a camera iff its pre-division depth
``u[2]`` exceeds ``EPS_DEPTH`` and its normalized coordinates fall inside
the closed unit square. Invalid entries carry coords (0, 0) and must never
be read downstream.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import rq
from scipy.spatial.transform import Rotation

# Near-plane in meters; projections with smaller depth are masked, never divided.
EPS_DEPTH = 1e-3


@dataclass(frozen=True)
class Camera:
    proj: np.ndarray  # (3, 4)
    width_px: int
    height_px: int

    def __post_init__(self):
        proj = np.asarray(self.proj, dtype=np.float64)
        if proj.shape != (3, 4):
            raise ValueError(f"camera proj must be 3x4, got {proj.shape}")
        if not np.all(np.isfinite(proj)):
            raise ValueError("camera proj contains non-finite entries")
        for name in ("width_px", "height_px"):
            v = getattr(self, name)
            if v <= 0 or v % 32 != 0:
                raise ValueError(f"{name} must be a positive multiple of 32, got {v}")
        object.__setattr__(self, "proj", proj)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 1:
            raise ValueError("a rig needs at least one camera")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)


@dataclass(frozen=True)
class ReferencePointSet:
    coords: np.ndarray  # (K, N, 2) normalized; (0, 0) where invalid
    valid: np.ndarray   # (K, N) bool
    depth: np.ndarray   # (K, N) pre-division homogeneous third coordinate, meters


@dataclass(frozen=True)
class DisturbanceConfig:
    probability: float
    max_rot_deg: float
    max_trans_m: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")
        if self.max_rot_deg < 0 or self.max_trans_m < 0:
            raise ValueError("disturbance magnitudes must be >= 0")


def to_homogeneous(points) -> np.ndarray:
    """Append a unit coordinate: (N, 3) -> (N, 4)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    return np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)


def project(rig: CameraRig, points) -> ReferencePointSet:
    """Project world points into every camera of the rig.

    Out-of-view and behind-camera points are masked, never raised.
    """
    pts_h = to_homogeneous(points)
    n = pts_h.shape[0]
    k = len(rig)
    coords = np.zeros((k, n, 2))
    valid = np.zeros((k, n), dtype=bool)
    depth = np.zeros((k, n))
    for i, cam in enumerate(rig.cameras):
        u = pts_h @ cam.proj.T            # (N, 3)
        d = u[:, 2]
        depth[i] = d
        front = d > EPS_DEPTH
        safe_d = np.where(front, d, 1.0)  # masked rows never divide by d
        px = u[:, 0] / safe_d
        py = u[:, 1] / safe_d
        cn = np.stack([px / cam.width_px, py / cam.height_px], axis=1)
        inside = (
            (cn[:, 0] >= 0.0) & (cn[:, 0] <= 1.0)
            & (cn[:, 1] >= 0.0) & (cn[:, 1] <= 1.0)
        )
        ok = front & inside
        valid[i] = ok
        coords[i][ok] = cn[ok]
    return ReferencePointSet(coords=coords, valid=valid, depth=depth)


def split_projection(proj):
    """Factor a 3x4 camera matrix into intrinsics K (upper triangular,
    positive diagonal), rotation R, and translation t with proj = K [R | t]."""
    K, R = rq(np.asarray(proj, dtype=np.float64)[:, :3])
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    K = K * signs[np.newaxis, :]
    R = R * signs[:, np.newaxis]
    t = np.linalg.solve(K, np.asarray(proj)[:, 3])
    return K, R, t


def compose_projection(K, R, t) -> np.ndarray:
    ext = np.concatenate([R, np.asarray(t, dtype=np.float64).reshape(3, 1)], axis=1)
    return np.asarray(K, dtype=np.float64) @ ext


def make_camera(K, R, t, width_px: int, height_px: int) -> Camera:
    return Camera(proj=compose_projection(K, R, t), width_px=width_px, height_px=height_px)


def sample_perturbation(cfg: DisturbanceConfig, rng: np.random.Generator):
    """Draw one extrinsic perturbation (R_d, t_d).

    The rotation axis is uniform on the sphere, the angle uniform in
    [-max_rot_deg, +max_rot_deg]; the translation is uniform in the cube
    [-max_trans_m, +max_trans_m]^3.
    """
    axis = rng.normal(size=3)
    norm = np.linalg.norm(axis)
    while norm < 1e-12:
        axis = rng.normal(size=3)
        norm = np.linalg.norm(axis)
    axis = axis / norm
    angle_deg = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg)
    rot = Rotation.from_rotvec(axis * np.deg2rad(angle_deg)).as_matrix()
    trans = rng.uniform(-cfg.max_trans_m, cfg.max_trans_m, size=3)
    return rot, trans


def disturb_calibration(rig: CameraRig, cfg: DisturbanceConfig, rng=None) -> CameraRig:
    """Independently perturb each camera's extrinsics with probability
    ``cfg.probability``; deterministic given ``cfg.seed`` when no stream is
    supplied. Undisturbed cameras are returned unchanged (bitwise)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    cameras = []
    for cam in rig.cameras:
        if rng.uniform() < cfg.probability:
            K, R, t = split_projection(cam.proj)
            rot, trans = sample_perturbation(cfg, rng)
            cam = Camera(
                proj=compose_projection(K, rot @ R, rot @ t + trans),
                width_px=cam.width_px,
                height_px=cam.height_px,
            )
        cameras.append(cam)
    return CameraRig(cameras=tuple(cameras))


# ---------------------------------------------------------------------------
# Serialization: {"cameras":[{"proj":[[...],[...],[...]],"width_px":..,"height_px":..}]}

def rig_to_json(rig: CameraRig) -> dict:
    return {
        "cameras": [
            {
                "proj": [[float(v) for v in row] for row in cam.proj],
                "width_px": int(cam.width_px),
                "height_px": int(cam.height_px),
            }
            for cam in rig.cameras
        ]
    }


def rig_from_json(data: dict) -> CameraRig:
    cams = tuple(
        Camera(
            proj=np.asarray(entry["proj"], dtype=np.float64),
            width_px=int(entry["width_px"]),
            height_px=int(entry["height_px"]),
        )
        for entry in data["cameras"]
    )
    return CameraRig(cameras=cams)


def save_rig(path, rig: CameraRig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rig_to_json(rig), fh, indent=2)
        fh.write("\n")


def load_rig(path) -> CameraRig:
    with open(path, "r", encoding="utf-8") as fh:
        return rig_from_json(json.load(fh))
