"""Rigid-transform math, Bezier curves, and labeled point clouds.

Conventions used throughout the package:

* quaternions are scalar-first ``[w, x, y, z]`` unit arrays, canonicalized
  so the first nonzero component is positive (one representative per
  rotation, which keeps serialized artifacts byte-stable),
* poses map local coordinates into the parent frame: ``p_world = R p + t``,
* all lengths are meters, all angles radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q):
    """Flip sign so the first nonzero component is positive."""
    q = np.asarray(q, dtype=float)
    for c in q:
        if c > 0.0:
            return q
        if c < 0.0:
            return -q
    raise ValueError("zero quaternion")


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    """Shepperd's method; returns the canonical unit quaternion."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_from_rotvec(r):
    """Exponential map: axis-angle 3-vector to unit quaternion."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    if angle < 1e-8:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        q = np.array([1.0 - angle * angle / 8.0, s * r[0], s * r[1], s * r[2]])
        return quat_canonical(quat_normalize(q))
    half = 0.5 * angle
    s = np.sin(half) / angle
    return quat_canonical(np.array([np.cos(half), s * r[0], s * r[1], s * r[2]]))


def rotvec_from_quat(q):
    """Logarithm map: unit quaternion to axis-angle 3-vector, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = np.linalg.norm(v)
    angle = 2.0 * np.arctan2(n, q[0])
    if n < 1e-9:
        # angle/sin(angle/2) ~ 2 + angle^2/12
        return v * (2.0 + angle * angle / 12.0)
    return v * (angle / n)


def quat_rotate(q, v):
    """Rotate one or many 3-vectors by a unit quaternion."""
    m = quat_to_matrix(q)
    v = np.asarray(v, dtype=float)
    return v @ m.T


def quat_geodesic(a, b):
    """Geodesic angle between two rotations, in [0, pi]."""
    d = quat_mul(quat_conjugate(a), b)
    return 2.0 * np.arctan2(np.linalg.norm(d[1:]), abs(d[0]))


def random_quat(rng):
    """Uniform random rotation (Shoemake subgroup algorithm)."""
    u1, u2, u3 = rng.uniform(size=3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.array([a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2),
                  b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)])
    return quat_canonical(q)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion ``q`` ([w,x,y,z]) plus translation ``t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_canonical(quat_normalize(self.q))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rotvec(r, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quat_from_rotvec(r), np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(matrix_to_quat(m[:3, :3]), m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """self then-applied-after other: (self * other)(p) = self(other(p))."""
        return Pose(quat_mul(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def transform(self, points):
        """Map one point (3,) or many points (N,3) into the parent frame."""
        return quat_rotate(self.q, points) + self.t

    def rotate(self, vectors):
        return quat_rotate(self.q, vectors)

    def rotvec(self):
        return rotvec_from_quat(self.q)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def to_array(self):
        """Serialize as [qw, qx, qy, qz, tx, ty, tz] (quaternion first)."""
        return np.concatenate([self.q, self.t])

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=float).reshape(7)
        return Pose(a[:4], a[4:])


def pose_distance(a: Pose, b: Pose, rot_weight: float = 0.1) -> float:
    """Translation norm plus ``rot_weight`` (m/rad) times geodesic angle.

    Symmetric, zero iff the poses coincide. The default weight treats one
    radian of orientation error like 10 cm of position error.
    """
    if rot_weight < 0:
        raise ValueError("rot_weight must be >= 0")
    return float(np.linalg.norm(a.t - b.t) + rot_weight * quat_geodesic(a.q, b.q))


@dataclass(frozen=True)
class Twist:
    """Decoupled velocity: world-frame angular (rad per unit time) + linear (m)."""

    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        ang = np.asarray(self.angular, dtype=float).reshape(3)
        lin = np.asarray(self.linear, dtype=float).reshape(3)
        if not (np.all(np.isfinite(ang)) and np.all(np.isfinite(lin))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "angular", ang)
        object.__setattr__(self, "linear", lin)


# ---------------------------------------------------------------------------
# Bezier curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BezierSegment:
    """Polynomial space curve defined by its control polygon, plus a duration."""

    control_points: np.ndarray
    duration: float

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.ndim != 2 or cp.shape[0] < 2 or cp.shape[1] != 3:
            raise ValueError("control_points must be (n>=2, 3)")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        cp = cp.copy()
        cp.flags.writeable = False
        object.__setattr__(self, "control_points", cp)


def bezier_eval(seg: BezierSegment, u: float):
    """Evaluate the curve at parameter ``u`` in [0, 1] by De Casteljau recursion."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"curve parameter {u} outside [0, 1]")
    pts = seg.control_points.copy()
    while len(pts) > 1:
        pts = (1.0 - u) * pts[:-1] + u * pts[1:]
    return pts[0]


def bezier_arclength_table(seg: BezierSegment, samples: int = 256):
    """Cumulative chord-length table ``(u_i, s_i)`` over ``samples`` intervals."""
    u = np.linspace(0.0, 1.0, samples + 1)
    pts = np.array([bezier_eval(seg, ui) for ui in u])
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return u, np.concatenate([[0.0], np.cumsum(steps)])


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

class Label(IntEnum):
    HAND = 0
    OBJECT = 1


@dataclass
class PointCloud:
    """N x 3 points in meters with optional per-point hand/object labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (pts.shape[0],):
                raise ValueError("labels must be (N,)")
            self.labels = lab

    def __len__(self):
        return self.points.shape[0]


def nearest_neighbor(query, cloud: PointCloud):
    """Index and distance of the closest cloud point; ties go to the lowest index."""
    if len(cloud) == 0:
        raise ValueError("nearest_neighbor on an empty cloud")
    pts = np.asarray(cloud.points, dtype=float)
    tree = cKDTree(pts)
    dist, idx = tree.query(np.asarray(query, dtype=float))
    # kd-tree tie order is unspecified; rescan the tie ball for the lowest index
    ties = tree.query_ball_point(np.asarray(query, dtype=float), dist * (1 + 1e-12) + 1e-300)
    if ties:
        idx = min(ties)
        dist = float(np.linalg.norm(pts[idx] - query))
    return int(idx), float(dist)
