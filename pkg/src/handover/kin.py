"""7-DoF arm kinematics: DH forward chain, geometric Jacobian, damped
least-squares inverse kinematics, and fixed-step joint-trajectory resampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .geom import Pose, quat_from_rotvec, quat_geodesic, quat_mul, rotvec_from_quat

ARM_SCHEMA = "arm/1"


@dataclass(frozen=True)
class ArmModel:
    """Serial 7R arm described by standard DH rows ``(a, d, alpha, theta_offset)``.

    ``gripper_keypoints`` live in the end-effector frame (+z = approach axis);
    the first keypoint is the fingertip midpoint used for proximity tests.
    """

    dh_parameters: np.ndarray          # (7, 4)
    joint_limits: np.ndarray           # (7, 2)
    gripper_keypoints: np.ndarray      # (K, 3)
    base_pose: Pose
    max_opening: float = 0.08
    home_config: np.ndarray | None = None

    def __post_init__(self):
        dh = np.asarray(self.dh_parameters, dtype=float)
        lim = np.asarray(self.joint_limits, dtype=float)
        kp = np.asarray(self.gripper_keypoints, dtype=float)
        if dh.shape != (7, 4):
            raise ValueError("dh_parameters must be (7, 4)")
        if lim.shape != (7, 2) or np.any(lim[:, 0] >= lim[:, 1]):
            raise ValueError("joint_limits must be (7, 2) with lo < hi")
        if kp.ndim != 2 or kp.shape[0] < 3 or kp.shape[1] != 3:
            raise ValueError("need at least 3 gripper keypoints")
        if np.linalg.matrix_rank(kp - kp.mean(axis=0), tol=1e-9) < 2:
            raise ValueError("gripper keypoints must not be collinear")
        home = self.home_config
        home = np.zeros(7) if home is None else np.asarray(home, dtype=float).reshape(7)
        for name, arr in (("dh_parameters", dh), ("joint_limits", lim),
                          ("gripper_keypoints", kp), ("home_config", home)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def tip_point(self):
        return self.gripper_keypoints[0]

    def with_base(self, base_pose: Pose) -> "ArmModel":
        return replace(self, base_pose=base_pose)

    def clamp(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])


def load_arm(path) -> ArmModel:
    """Load an arm description file (schema ``arm/1``)."""
    with open(path) as f:
        doc = json.load(f)
    return _arm_from_dict(doc)


def default_arm() -> ArmModel:
    doc = json.loads(resources.files("handover.data").joinpath("panda_arm.json").read_text())
    return _arm_from_dict(doc)


def _arm_from_dict(doc) -> ArmModel:
    if doc.get("schema") != ARM_SCHEMA:
        raise ValueError(f"unsupported arm schema: {doc.get('schema')!r}")
    return ArmModel(
        dh_parameters=np.array(doc["dh_parameters"], dtype=float),
        joint_limits=np.array(doc["joint_limits"], dtype=float),
        gripper_keypoints=np.array(doc["gripper_keypoints"], dtype=float),
        base_pose=Pose.identity(),
        max_opening=float(doc.get("max_opening", 0.08)),
        home_config=np.array(doc["home_config"], dtype=float) if "home_config" in doc else None,
    )


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _link_pose(a, d, alpha, theta):
    # standard DH: RotZ(theta) TransZ(d) TransX(a) RotX(alpha)
    qz = quat_from_rotvec([0.0, 0.0, theta])
    qx = quat_from_rotvec([alpha, 0.0, 0.0])
    t = np.array([a * np.cos(theta), a * np.sin(theta), d])
    return Pose(quat_mul(qz, qx), t)


def fk_frames(model: ArmModel, q) -> list[Pose]:
    """World pose of the base and of every link frame; last entry = end effector."""
    q = np.asarray(q, dtype=float).reshape(7)
    frames = [model.base_pose]
    cur = model.base_pose
    for i in range(7):
        a, d, alpha, off = model.dh_parameters[i]
        cur = cur.compose(_link_pose(a, d, alpha, q[i] + off))
        frames.append(cur)
    return frames


def forward_kinematics(model: ArmModel, q) -> Pose:
    """End-effector pose in the world frame."""
    return fk_frames(model, q)[-1]


def jacobian(model: ArmModel, q):
    """Geometric Jacobian (6 x 7): rows 0-2 linear, rows 3-5 angular, world frame."""
    frames = fk_frames(model, q)
    p_ee = frames[-1].t
    J = np.zeros((6, 7))
    for i in range(7):
        z = frames[i].rotate(np.array([0.0, 0.0, 1.0]))
        p = frames[i].t
        J[:3, i] = np.cross(z, p_ee - p)
        J[3:, i] = z
    return J


# ---------------------------------------------------------------------------
# inverse kinematics
# ---------------------------------------------------------------------------

def _pose_error(current: Pose, target: Pose):
    """6-vector world-frame error [dt; rotvec(R_t R_c^-1)]."""
    dt = target.t - current.t
    dq = quat_mul(target.q, np.array([current.q[0], *(-current.q[1:])]))
    return np.concatenate([dt, rotvec_from_quat(dq)])


def solve_ik(model: ArmModel, target: Pose, seed, tol_t: float = 1e-3,
             tol_r: float = 1e-2, max_iters: int = 200, damping: float = 0.01,
             step_clamp: float = 0.2):
    """Damped least-squares IK seeded from a previous configuration.

    Returns the solving joint vector, or ``None`` when the target was not
    reached within ``max_iters`` (callers branch on this rather than catching
    an exception: an unreachable grasp is an expected planning outcome).
    """
    if tol_t <= 0 or tol_r <= 0:
        raise ValueError("tolerances must be positive")
    q = model.clamp(np.asarray(seed, dtype=float).reshape(7).copy())
    lam2 = damping * damping

    def converged(cur):
        return (np.linalg.norm(target.t - cur.t) <= tol_t
                and quat_geodesic(target.q, cur.q) <= tol_r)

    for _ in range(max_iters):
        cur = forward_kinematics(model, q)
        if converged(cur):
            return q
        e = _pose_error(cur, target)
        J = jacobian(model, q)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), e)
        dq = np.clip(dq, -step_clamp, step_clamp)
        q = model.clamp(q + dq)
    return q if converged(forward_kinematics(model, q)) else None


# ---------------------------------------------------------------------------
# trajectory resampling
# ---------------------------------------------------------------------------

def resample_joint_trajectory(traj, step_length: float):
    """Re-space a joint trajectory at a fixed accumulated step length.

    Interior points interpolate linearly between the two waypoints bracketing
    each arc-length multiple of ``step_length``; the first and last waypoints
    are preserved exactly. Output length is M+1 with (M-1)L < s_total <= M L.
    Consecutive duplicate waypoints add zero arc length and are skipped when
    picking interpolation brackets.
    """
    if step_length <= 0:
        raise ValueError("step_length must be positive")
    C = np.asarray(traj, dtype=float)
    if C.ndim != 2 or C.shape[0] < 2:
        raise ValueError("trajectory needs at least 2 configurations")
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(C, axis=0), axis=1))])
    total = s[-1]
    if total <= 0.0:
        return np.array([C[0], C[-1]])
    m = int(np.ceil(total / step_length - 1e-9))
    out = np.empty((m + 1, C.shape[1]))
    out[0] = C[0]
    out[m] = C[-1]
    for i in range(1, m):
        target = i * step_length
        # side="right" lands on the last waypoint with s <= target, which also
        # skips zero-length (duplicate) spans: s[j] <= target < s[j+1]
        j = min(int(np.searchsorted(s, target, side="right")) - 1, len(s) - 2)
        w = (target - s[j]) / (s[j + 1] - s[j])
        out[i] = (1.0 - w) * C[j] + w * C[j + 1]
    return out
