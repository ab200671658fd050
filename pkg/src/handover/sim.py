"""Kinematic episode engine.

One episode advances the hand/object along the scene trajectory while the
robot executes egocentric 6D actions through per-frame IK. The hand freezes
once the fingertip comes within ``freeze_distance`` of the object cloud and
never resumes. Success is adjudicated kinematically: the end effector must
match a grasp candidate on the current object pose, keep the closing sweep
clear of the hand, and have time left to retract to the goal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .geom import (Label, PointCloud, Pose, quat_geodesic, quat_from_rotvec,
                   rotvec_from_quat)
from .kin import ArmModel, forward_kinematics, resample_joint_trajectory, solve_ik
from .scene import HandoverScene


class Phase(Enum):
    APPROACH = "approach"
    GRASP_RETRACT = "grasp_retract"
    DONE = "done"


class Outcome(Enum):
    SUCCESS = "success"
    HAND_CONTACT = "hand_contact"
    DROP = "drop"
    TIMEOUT = "timeout"


@dataclass
class SimConfig:
    frame_rate: float = 20.0
    obs_cap: int = 512
    max_step_t: float = 0.04          # per-frame translation clamp, m
    max_step_r: float = 0.2           # per-frame rotation clamp, rad
    cam_back_offset: float = 0.05     # camera sits this far behind the fingertip
    cam_fov_deg: float = 90.0
    cam_near: float = 0.05
    cam_far: float = 2.0
    freeze_distance: float = 0.1      # hand stops when fingertip is this close
    grasp_tol_t: float = 0.02
    grasp_tol_r: float = 0.15
    close_clearance: float = 0.005    # hand points inside the closing sweep fail
    retract_step: float = 0.05        # joint rad per frame on the retract path
    t_max: float = 13.0
    ik_tol_t: float = 1e-3
    ik_tol_r: float = 1e-2
    ik_max_iters: int = 60


@dataclass(frozen=True)
class Action:
    """Egocentric gripper motion: camera-frame translation + axis-angle rotation."""

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        r = np.asarray(self.rotation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)

    @staticmethod
    def zero() -> "Action":
        return Action(np.zeros(3), np.zeros(3))

    def to_array(self):
        return np.concatenate([self.translation, self.rotation])

    @staticmethod
    def from_array(a) -> "Action":
        a = np.asarray(a, dtype=float).reshape(6)
        return Action(a[:3], a[3:])


def clamp_action(action: Action, cfg: SimConfig) -> Action:
    """Scale translation/rotation down to the per-frame step limits."""
    t, r = action.translation, action.rotation
    nt, nr = np.linalg.norm(t), np.linalg.norm(r)
    if nt > cfg.max_step_t:
        t = t * (cfg.max_step_t / nt)
    if nr > cfg.max_step_r:
        r = r * (cfg.max_step_r / nr)
    return Action(t, r)


@dataclass
class Observation:
    """Egocentric labeled point cloud plus the world end-effector pose."""

    points: np.ndarray          # (N, 3) camera frame
    labels: np.ndarray          # (N,) Label values
    ee_pose: Pose
    frame: int

    def __len__(self):
        return self.points.shape[0]

    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.labels)


@dataclass
class EpisodeState:
    frame: int
    sim_time: float
    arm_q: np.ndarray
    object_pose: Pose
    hand_frozen: bool
    phase: Phase
    rng: np.random.Generator


@dataclass
class EpisodeResult:
    outcome: Outcome
    success_time: float | None = None
    trace: list | None = None

    @property
    def success(self):
        return self.outcome is Outcome.SUCCESS


class SceneRuntime:
    """Per-episode caches: kd-trees in body frames, grasp array, camera offset."""

    def __init__(self, scene: HandoverScene, arm: ArmModel, cfg: SimConfig):
        self.scene = scene
        self.arm = arm
        self.cfg = cfg
        self.object_tree = cKDTree(np.asarray(scene.object_points.points, dtype=float))
        self.hand_tree = cKDTree(np.asarray(scene.hand_points.points, dtype=float))
        tip = arm.tip_point
        # camera frame: same orientation as the end effector, origin behind the tip
        self.cam_in_ee = Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                              tip - np.array([0.0, 0.0, cfg.cam_back_offset]))
        self.tip_in_cam = self.cam_in_ee.inverse().transform(tip)
        self._obj_pts = np.asarray(scene.object_points.points, dtype=float)
        self._hand_pts = np.asarray(scene.hand_points.points, dtype=float)

    def camera_pose(self, ee_pose: Pose) -> Pose:
        return ee_pose.compose(self.cam_in_ee)


def initial_state(rt: SceneRuntime, seed: int = 0) -> EpisodeState:
    return EpisodeState(
        frame=0,
        sim_time=0.0,
        arm_q=np.asarray(rt.arm.home_config, dtype=float).copy(),
        object_pose=rt.scene.pose_at(0),
        hand_frozen=False,
        phase=Phase.APPROACH,
        rng=np.random.default_rng(seed),
    )


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def action_to_target(ee_pose: Pose, action: Action, cam_in_ee: Pose) -> Pose:
    """World end-effector target implied by a camera-frame delta."""
    delta = Pose(quat_from_rotvec(action.rotation), action.translation)
    return ee_pose.compose(cam_in_ee).compose(delta).compose(cam_in_ee.inverse())


def action_from_target(ee_pose: Pose, target: Pose, cam_in_ee: Pose) -> Action:
    """Camera-frame delta that maps the current end-effector pose onto target."""
    delta = ee_pose.compose(cam_in_ee).inverse().compose(target.compose(cam_in_ee))
    return Action(delta.t, rotvec_from_quat(delta.q))


def step(rt: SceneRuntime, state: EpisodeState, action: Action) -> EpisodeState:
    """Advance one frame: clamp + execute the action, move the hand, test freeze."""
    if state.phase is not Phase.APPROACH:
        raise RuntimeError(f"step() called in phase {state.phase}")
    cfg = rt.cfg
    action = clamp_action(action, cfg)

    ee = forward_kinematics(rt.arm, state.arm_q)
    target = action_to_target(ee, action, rt.cam_in_ee)
    q = solve_ik(rt.arm, target, state.arm_q, tol_t=cfg.ik_tol_t, tol_r=cfg.ik_tol_r,
                 max_iters=cfg.ik_max_iters)
    arm_q = state.arm_q if q is None else q  # on IK failure the arm holds

    if state.hand_frozen:
        object_pose = state.object_pose
    else:
        object_pose = rt.scene.pose_at(state.frame + 1)

    frozen = state.hand_frozen
    if not frozen:
        tip_world = forward_kinematics(rt.arm, arm_q).transform(rt.arm.tip_point)
        tip_obj = object_pose.inverse().transform(tip_world)
        dist, _ = rt.object_tree.query(tip_obj)
        frozen = bool(dist <= cfg.freeze_distance)

    frame = state.frame + 1
    return replace(state, frame=frame, sim_time=frame / cfg.frame_rate,
                   arm_q=arm_q, object_pose=object_pose, hand_frozen=frozen)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def observe(rt: SceneRuntime, state: EpisodeState) -> Observation:
    """Egocentric labeled cloud: frustum-culled, deterministically subsampled."""
    cfg = rt.cfg
    ee = forward_kinematics(rt.arm, state.arm_q)
    cam = rt.camera_pose(ee)
    inv = cam.inverse()
    hand_pose = state.object_pose.compose(rt.scene.hand_in_object)
    pts = np.concatenate([inv.transform(hand_pose.transform(rt._hand_pts)),
                          inv.transform(state.object_pose.transform(rt._obj_pts))])
    labels = np.concatenate([np.full(len(rt._hand_pts), Label.HAND, dtype=np.int8),
                             np.full(len(rt._obj_pts), Label.OBJECT, dtype=np.int8)])
    half_tan = np.tan(np.deg2rad(cfg.cam_fov_deg) / 2.0)
    z = pts[:, 2]
    keep = ((z >= cfg.cam_near) & (z <= cfg.cam_far)
            & (np.abs(pts[:, 0]) <= z * half_tan) & (np.abs(pts[:, 1]) <= z * half_tan))
    pts, labels = pts[keep], labels[keep]
    if len(pts) > cfg.obs_cap:
        idx = np.floor(np.linspace(0, len(pts) - 1, cfg.obs_cap)).astype(int)
        pts, labels = pts[idx], labels[idx]
    return Observation(points=pts, labels=labels, ee_pose=ee, frame=state.frame)


def points_near_tip(rt: SceneRuntime, obs: Observation, radius: float) -> int:
    """Observed points within ``radius`` of the fingertip (camera frame)."""
    if len(obs) == 0:
        return 0
    d = np.linalg.norm(obs.points - rt.tip_in_cam, axis=1)
    return int(np.sum(d <= radius))


# ---------------------------------------------------------------------------
# grasp adjudication and metrics
# ---------------------------------------------------------------------------

def closing_sweep_points(arm: ArmModel):
    """Proxy for the volume swept by the closing fingers, in the EE frame."""
    kp = np.asarray(arm.gripper_keypoints, dtype=float)
    tip = kp[0]
    pads = kp[1:3] if len(kp) >= 3 else kp[:2]
    line = np.linspace(pads[0], pads[1], 9)
    return np.concatenate([kp, line, line + (tip - pads.mean(axis=0)) * 0.5])


def attempt_grasp_and_retract(rt: SceneRuntime, state: EpisodeState) -> EpisodeResult:
    """Open-loop finish: close the gripper and retract to the goal.

    Hand contact beats pose mismatch beats retraction timeout; success time
    adds the straight resampled joint path duration at the nominal step rate.
    """
    if state.phase is not Phase.APPROACH:
        raise RuntimeError(f"attempt_grasp_and_retract() called in phase {state.phase}")
    cfg = rt.cfg
    ee = forward_kinematics(rt.arm, state.arm_q)
    state.phase = Phase.DONE

    sweep = ee.transform(closing_sweep_points(rt.arm))
    hand_pose = state.object_pose.compose(rt.scene.hand_in_object)
    sweep_hand = hand_pose.inverse().transform(sweep)
    d, _ = rt.hand_tree.query(sweep_hand)
    if np.min(d) < cfg.close_clearance:
        return EpisodeResult(Outcome.HAND_CONTACT)

    matched = False
    for g in rt.scene.grasp_candidates:
        gw = state.object_pose.compose(g)
        if (np.linalg.norm(gw.t - ee.t) <= cfg.grasp_tol_t
                and quat_geodesic(gw.q, ee.q) <= cfg.grasp_tol_r):
            matched = True
            break
    if not matched:
        return EpisodeResult(Outcome.DROP)

    q_goal = solve_ik(rt.arm, rt.scene.goal_pose, state.arm_q)
    if q_goal is None:
        q_goal = solve_ik(rt.arm, rt.scene.goal_pose, rt.arm.home_config)
    if q_goal is None:
        return EpisodeResult(Outcome.TIMEOUT)
    path = resample_joint_trajectory(np.array([state.arm_q, q_goal]), cfg.retract_step)
    retract_time = (len(path) - 1) / cfg.frame_rate
    total = state.sim_time + retract_time
    if total > cfg.t_max:
        return EpisodeResult(Outcome.TIMEOUT)
    return EpisodeResult(Outcome.SUCCESS, success_time=total)


@dataclass
class MetricsReport:
    S: float
    T: float | None
    AS: float
    n_episodes: int
    outcomes: dict

    def to_dict(self):
        return {"S": self.S, "T": self.T, "AS": self.AS,
                "n": self.n_episodes, "outcomes": self.outcomes}


def compute_metrics(results, t_max: float = 13.0) -> MetricsReport:
    """Success rate, mean success time, and time-integrated average success.

    The integral of the success-over-normalized-time step function has the
    closed form mean(1 - t_i / t_max) over successful episodes (failures
    contribute zero).
    """
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    n = len(results)
    times = np.array([r.success_time for r in results if r.success])
    hist = {o.value: 0 for o in Outcome}
    for r in results:
        hist[r.outcome.value] += 1
    s = len(times) / n
    t = float(times.mean()) if len(times) else None
    a_s = float(np.sum(1.0 - times / t_max) / n) if len(times) else 0.0
    return MetricsReport(S=s, T=t, AS=a_s, n_episodes=n, outcomes=hist)


# ---------------------------------------------------------------------------
# episode loop
# ---------------------------------------------------------------------------

def run_episode(rt: SceneRuntime, controller, trigger, seed: int = 0,
                record: bool = False, feature_fn=None):
    """Drive one closed-loop episode; shared by expert recording and policies.

    ``controller(obs, state, feats) -> Action`` is queried each frame until
    either the grasp trigger fires (points near the fingertip exceed the
    trigger threshold) or time runs out. ``feature_fn(obs) -> feats`` is
    invoked per frame when given (flow features for policies / recording).
    Returns ``(EpisodeResult, frames)`` where frames is the recorded list of
    (obs, feats, action, object_pose, ee_pose) tuples when recording.
    """
    cfg = rt.cfg
    state = initial_state(rt, seed)
    frames = []
    max_frames = int(np.ceil(cfg.t_max * cfg.frame_rate))
    while True:
        obs = observe(rt, state)
        if points_near_tip(rt, obs, trigger.vicinity_radius) > trigger.point_count_threshold:
            result = attempt_grasp_and_retract(rt, state)
            break
        feats = feature_fn(obs) if feature_fn is not None else None
        action = clamp_action(controller(obs, state, feats), cfg)
        if record:
            frames.append((obs, feats, action, state.object_pose, obs.ee_pose))
        state = step(rt, state, action)
        if state.frame >= max_frames:
            state.phase = Phase.DONE
            result = EpisodeResult(Outcome.TIMEOUT)
            break
    return result, frames
