"""Discrete action signals to continuous camera trajectories and ray embeddings.

Keyboard keys map to per-frame SE(3) increments: W/A/S/D and Space translate
along body axes, arrow keys yaw/pitch about body axes, Idle holds the pose.
Each pose renders to a per-pixel 6-channel ray map (unit direction plus
moment), the camera conditioning consumed by the denoiser.

Camera frame convention: +x right, +y down, +z forward (pixel rays use the
(u - cx)/fx style mapping), so the body-frame "up" axis is -y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Motion defaults tuned for smooth travel across 25-frame segments.
DEFAULT_LINEAR_SPEED = 0.05
DEFAULT_ANGULAR_SPEED = math.pi / 90.0
PITCH_LIMIT = math.pi / 2.0 - 0.01

ACTION_KEYS = ("W", "A", "S", "D", "ArrowUp", "ArrowDown", "ArrowLeft",
               "ArrowRight", "Space", "Idle")

_FORWARD = np.array([0.0, 0.0, 1.0])
_RIGHT = np.array([1.0, 0.0, 0.0])
_UP = np.array([0.0, -1.0, 0.0])

# key -> (translation body axis, sign) for translation keys
_TRANSLATIONS = {
    "W": (_FORWARD, 1.0),
    "S": (_FORWARD, -1.0),
    "D": (_RIGHT, 1.0),
    "A": (_RIGHT, -1.0),
    "Space": (_UP, 1.0),
}
# key -> (rotation body axis, sign) for look keys
_ROTATIONS = {
    "ArrowLeft": (_UP, 1.0),
    "ArrowRight": (_UP, -1.0),
    "ArrowUp": (_RIGHT, 1.0),
    "ArrowDown": (_RIGHT, -1.0),
}


class ActionError(ValueError):
    """Invalid action key, segment, or script line."""


def parse_action_key(name: str) -> str:
    if name not in ACTION_KEYS:
        raise ActionError(f"unknown action key {name!r}; expected one of {ACTION_KEYS}")
    return name


# --------------------------------------------------------------------------
# quaternion helpers (w, x, y, z), rotations are world-from-camera
# --------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector ``v`` by quaternion ``q``."""
    qv = np.concatenate([[0.0], v])
    return quat_multiply(quat_multiply(q, qv), quat_conjugate(q))[1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of ``q`` in [0, pi]."""
    vec = float(np.linalg.norm(q[1:]))
    return 2.0 * math.atan2(vec, abs(float(q[0])))


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionSegment:
    key: str
    duration_frames: int
    linear_speed: float = DEFAULT_LINEAR_SPEED
    angular_speed: float = DEFAULT_ANGULAR_SPEED

    def __post_init__(self):
        parse_action_key(self.key)
        if self.duration_frames < 1:
            raise ActionError("duration_frames must be >= 1")
        for name in ("linear_speed", "angular_speed"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ActionError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rotation (unit quaternion) and position."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(quat_identity(), np.zeros(3))

    def forward(self) -> np.ndarray:
        return quat_rotate(self.rotation, _FORWARD)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.position
        return m

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self followed by ``other`` in self's body frame (SE(3) product)."""
        rot = quat_normalize(quat_multiply(self.rotation, other.rotation))
        pos = self.position + quat_rotate(self.rotation, other.position)
        return CameraPose(rot, pos)

    def inverse(self) -> "CameraPose":
        inv = quat_conjugate(self.rotation)
        return CameraPose(inv, -quat_rotate(inv, self.position))

    def allclose(self, other: "CameraPose", tol: float = 1e-12) -> bool:
        dq = min(np.abs(self.rotation - other.rotation).max(),
                 np.abs(self.rotation + other.rotation).max())
        return dq <= tol and np.abs(self.position - other.position).max() <= tol


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class Trajectory:
    poses: list[CameraPose] = field(default_factory=list)

    def __post_init__(self):
        if not self.poses:
            raise ValueError("trajectory must be non-empty")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def positions(self) -> np.ndarray:
        return np.stack([p.position for p in self.poses])

    def extend(self, other: "Trajectory") -> None:
        """Append ``other`` minus its duplicated junction pose."""
        self.poses.extend(other.poses[1:])


@dataclass(frozen=True)
class PluckerMap:
    """(H, W, 6) ray map; channels are unit direction d then moment p x d."""

    channels: np.ndarray

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[2] != 6:
            raise ValueError("expected (H, W, 6) channel array")

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def _current_pitch(rotation: np.ndarray) -> float:
    f = quat_rotate(rotation, _FORWARD)
    return math.asin(max(-1.0, min(1.0, -float(f[1]))))


def step_pose(pose: CameraPose, key: str, linear_speed: float,
              angular_speed: float) -> CameraPose:
    """Advance one frame: body-frame rotation first, then translation."""
    rotation = pose.rotation
    position = pose.position
    if key in _ROTATIONS:
        axis, sign = _ROTATIONS[key]
        angle = sign * angular_speed
        if key in ("ArrowUp", "ArrowDown"):
            # Clamp the increment so cumulative pitch stays clear of gimbal lock.
            pitch = _current_pitch(rotation)
            target = max(-PITCH_LIMIT, min(PITCH_LIMIT, pitch + angle))
            angle = target - pitch
        rotation = quat_normalize(quat_multiply(rotation, quat_from_axis_angle(axis, angle)))
    elif key in _TRANSLATIONS:
        axis, sign = _TRANSLATIONS[key]
        position = position + sign * linear_speed * quat_rotate(rotation, axis)
    elif key != "Idle":
        raise ActionError(f"unknown action key {key!r}")
    return CameraPose(rotation, position)


def action_to_trajectory(segments: list[ActionSegment], start: CameraPose) -> Trajectory:
    """Integrate segments frame by frame from ``start``.

    The returned trajectory has 1 + sum(duration_frames) poses, the first
    being ``start`` itself.
    """
    if not segments:
        raise ActionError("segment list must be non-empty")
    poses = [start]
    for seg in segments:
        for _ in range(seg.duration_frames):
            poses.append(step_pose(poses[-1], seg.key, seg.linear_speed,
                                   seg.angular_speed))
    return Trajectory(poses)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-center coordinates spanning [-1, 1] per axis."""
    u = (2.0 * np.arange(width) + 1.0) / width - 1.0
    v = (2.0 * np.arange(height) + 1.0) / height - 1.0
    return u, v


def pose_to_plucker(pose: CameraPose, intr: Intrinsics, height: int,
                    width: int) -> PluckerMap:
    """Render the pose as a per-pixel (direction, moment) map, row-major."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    u, v = pixel_grid(height, width)
    uu, vv = np.meshgrid(u, v)  # (H, W), v outer / u inner
    cam = np.stack([(uu - intr.cx) / intr.fx,
                    (vv - intr.cy) / intr.fy,
                    np.ones_like(uu)], axis=-1)
    rot = quat_to_matrix(pose.rotation)
    world = cam @ rot.T
    world = world / np.linalg.norm(world, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(pose.position, world.shape), world)
    return PluckerMap(np.concatenate([world, moment], axis=-1))


def pool_plucker_map(pmap: PluckerMap, token_grid: tuple[int, int]) -> np.ndarray:
    """Average-pool the 6-channel map to (rows * cols, 6) token vectors."""
    rows, cols = token_grid
    if pmap.height % rows or pmap.width % cols:
        raise ValueError(f"token grid {token_grid} does not divide pixel grid "
                         f"({pmap.height}, {pmap.width})")
    bh, bw = pmap.height // rows, pmap.width // cols
    c = pmap.channels.reshape(rows, bh, cols, bw, 6)
    return c.mean(axis=(1, 3)).reshape(rows * cols, 6)


def plucker_to_tokens(pmap: PluckerMap, token_grid: tuple[int, int],
                      proj_w: np.ndarray, proj_b: np.ndarray) -> np.ndarray:
    """Pool to the token grid and lift 6 -> model channels linearly."""
    return pool_plucker_map(pmap, token_grid) @ proj_w + proj_b


# --------------------------------------------------------------------------
# external interfaces: action scripts and trajectory CSV
# --------------------------------------------------------------------------

def parse_action_script(text: str) -> list[ActionSegment]:
    """Parse `KEY duration [linear_speed] [angular_speed]` lines.

    Blank lines and `#` comments are skipped.
    """
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2 or len(parts) > 4:
            raise ActionError(f"line {lineno}: expected `KEY duration "
                              f"[linear_speed] [angular_speed]`, got {raw!r}")
        key = parse_action_key(parts[0])
        try:
            duration = int(parts[1])
            linear = float(parts[2]) if len(parts) > 2 else DEFAULT_LINEAR_SPEED
            angular = float(parts[3]) if len(parts) > 3 else DEFAULT_ANGULAR_SPEED
        except ValueError as e:
            raise ActionError(f"line {lineno}: {e}") from None
        segments.append(ActionSegment(key, duration, linear, angular))
    if not segments:
        raise ActionError("action script contains no segments")
    return segments


def trajectory_to_csv(traj: Trajectory) -> str:
    lines = ["frame,qw,qx,qy,qz,px,py,pz"]
    for i, pose in enumerate(traj.poses):
        q, p = pose.rotation, pose.position
        lines.append(f"{i},{q[0]:.17g},{q[1]:.17g},{q[2]:.17g},{q[3]:.17g},"
                     f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}")
    return "\n".join(lines) + "\n"


def trajectory_from_csv(text: str) -> Trajectory:
    poses = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("frame"):
        raise ValueError("missing trajectory CSV header")
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 8:
            raise ValueError(f"bad trajectory row: {ln!r}")
        vals = [float(x) for x in parts[1:]]
        poses.append(CameraPose(np.array(vals[:4]), np.array(vals[4:])))
    return Trajectory(poses)
