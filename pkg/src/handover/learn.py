"""Imitation learner: point-set policy network, composite loss, optimizer,
checkpoints, and closed-loop execution.

The network is a single-scale point encoder (shared per-point MLP + channel
max-pool) with two heads: a 6D egocentric action and a stack of future
object-pose transforms. Forward and reverse passes are written out by hand
in numpy so every gradient is finite-difference checkable and training is
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geom import Pose, rotvec_from_quat
from .percept import FEATURE_BASE, feature_width, make_feature_fn
from .sim import Action, SceneRuntime, run_episode


@dataclass(frozen=True)
class GraspTrigger:
    """Fire the open-loop grasp when enough observed points crowd the tip."""

    vicinity_radius: float = 0.03
    point_count_threshold: int = 20

    def __post_init__(self):
        if self.vicinity_radius <= 0 or self.point_count_threshold < 1:
            raise ValueError("radius must be positive and threshold >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 10_000
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    lam: float = 0.1            # prediction-loss weight
    l1: int = 3                 # history steps in the flow feature
    l2: int = 3                 # future steps predicted
    feature_mode: str = "flow"  # flow | current | stack
    seed: int = 0
    log_every: int = 200

    def __post_init__(self):
        if min(self.batch_size, self.iterations, self.l1, self.l2) < 1 \
                or self.learning_rate <= 0 or self.weight_decay < 0 or self.lam < 0:
            raise ValueError("invalid training configuration")


# ---------------------------------------------------------------------------
# axis-angle rotation of a fixed point set, with an analytic Jacobian
# ---------------------------------------------------------------------------

def rotate_keypoints(r, kp):
    """Rotate keypoints ``kp`` (K,3) by axis-angle rows ``r`` (B,3).

    Returns (out, grad): out (B,K,3) and grad (B,K,3,3) with
    grad[b,k,i,j] = d out[b,k,i] / d r[b,j]. Uses series expansions of the
    Rodrigues coefficients below 1e-4 rad so the Jacobian stays smooth at 0.
    """
    r = np.asarray(r, dtype=float)
    kp = np.asarray(kp, dtype=float)
    B, K = r.shape[0], kp.shape[0]
    th2 = np.einsum("bj,bj->b", r, r)
    th = np.sqrt(th2)
    small = th < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - th2 / 6.0, np.sin(th) / np.where(small, 1.0, th))
        b = np.where(small, 0.5 - th2 / 24.0,
                     (1.0 - np.cos(th)) / np.where(small, 1.0, th2))
        a1 = np.where(small, -1.0 / 3.0 + th2 / 30.0,
                      (th * np.cos(th) - np.sin(th)) / np.where(small, 1.0, th2 * th))
        b1 = np.where(small, -1.0 / 12.0 + th2 / 180.0,
                      (th * np.sin(th) - 2.0 * (1.0 - np.cos(th))) / np.where(small, 1.0, th2 * th2))

    rxk = np.cross(r[:, None, :], kp[None, :, :])              # (B,K,3)
    rdk = r @ kp.T                                             # (B,K)
    u = r[:, None, :] * rdk[:, :, None] - kp[None, :, :] * th2[:, None, None]
    out = kp[None, :, :] + a[:, None, None] * rxk + b[:, None, None] * u

    skew = np.zeros((K, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -kp[:, 2], kp[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = kp[:, 2], -kp[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -kp[:, 1], kp[:, 0]
    eye = np.eye(3)
    grad = (
        a1[:, None, None, None] * rxk[:, :, :, None] * r[:, None, None, :]
        - a[:, None, None, None] * skew[None, :, :, :]
        + b1[:, None, None, None] * u[:, :, :, None] * r[:, None, None, :]
        + b[:, None, None, None] * (
            rdk[:, :, None, None] * eye[None, None, :, :]
            + r[:, None, :, None] * kp[None, :, None, :]
            - 2.0 * kp[None, :, :, None] * r[:, None, None, :])
    )
    return out, grad


def apply_action_to_keypoints(actions, kp):
    """Transform keypoints by 6D actions [translation, axis-angle]."""
    out, grad = rotate_keypoints(actions[:, 3:], kp)
    return out + actions[:, None, :3], grad


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def action_point_loss(pred_actions, expert_actions, keypoints):
    """Point-matching action loss: mean per-keypoint L1 between keypoint sets
    transformed by the predicted vs the expert action. Returns (loss, dpred).
    """
    kp_p, grad = apply_action_to_keypoints(pred_actions, keypoints)
    kp_e, _ = apply_action_to_keypoints(expert_actions, keypoints)
    diff = kp_p - kp_e
    B, K = diff.shape[0], diff.shape[1]
    loss = float(np.abs(diff).sum() / (B * K))
    dd = np.sign(diff) / (B * K)
    dt = dd.sum(axis=1)
    dr = np.einsum("bki,bkij->bj", dd, grad)
    return loss, np.concatenate([dt, dr], axis=1)


def l1_loss(pred, target):
    """Mean absolute error over every entry. Returns (loss, dpred)."""
    diff = pred - target
    n = max(1, diff.size)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


# ---------------------------------------------------------------------------
# the policy network
# ---------------------------------------------------------------------------

ENCODER_WIDTHS = (64, 128, 256)
HEAD_HIDDEN = 128


class PolicyNetwork:
    """Per-point MLP encoder, channel max-pool, action + prediction heads."""

    def __init__(self, input_dim: int, l2: int = 3, rng=None,
                 feature_mode: str = "flow", l1: int = 3, lam: float = 0.1):
        self.input_dim = input_dim
        self.l1 = l1
        self.l2 = l2
        self.lam = lam
        self.feature_mode = feature_mode
        rng = rng or np.random.default_rng(0)
        self.param_names = []
        self.params = {}
        dims = [input_dim, *ENCODER_WIDTHS]
        for i in range(3):
            self._add(f"enc{i}", dims[i], dims[i + 1], rng)
        self._add("act0", ENCODER_WIDTHS[-1], HEAD_HIDDEN, rng)
        self._add("act1", HEAD_HIDDEN, 6, rng)
        self._add("pred0", ENCODER_WIDTHS[-1], HEAD_HIDDEN, rng)
        self._add("pred1", HEAD_HIDDEN, 6 * l2, rng)

    def _add(self, name, fan_in, fan_out, rng):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}_W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params[f"{name}_b"] = rng.uniform(-bound, bound, size=fan_out)
        self.param_names += [f"{name}_W", f"{name}_b"]

    # -- parameter vector helpers (checkpoints, optimizer, grad checks) -----

    def params_vector(self):
        return np.concatenate([self.params[n].ravel() for n in self.param_names])

    def set_params_vector(self, vec):
        off = 0
        for n in self.param_names:
            p = self.params[n]
            self.params[n] = vec[off:off + p.size].reshape(p.shape).copy()
            off += p.size

    # -- forward / backward -------------------------------------------------

    def forward(self, feats, counts):
        """Run a batch of point sets.

        ``feats`` is the (sum(counts), input_dim) concatenation of per-sample
        point features. Returns (actions (B,6), preds (B,6*l2), cache).
        Samples with zero points produce zero outputs.
        """
        feats = np.asarray(feats, dtype=float)
        counts = np.asarray(counts, dtype=int)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        p = self.params
        zs, hs = [], [feats]
        h = feats
        for i in range(3):
            z = h @ p[f"enc{i}_W"] + p[f"enc{i}_b"]
            h = np.maximum(z, 0.0)
            zs.append(z)
            hs.append(h)
        B = len(counts)
        C = h.shape[1]
        pooled = np.zeros((B, C))
        amax = np.full((B, C), -1, dtype=int)
        for bdx in range(B):
            s, e = offsets[bdx], offsets[bdx + 1]
            if e > s:
                seg = h[s:e]
                idx = np.argmax(seg, axis=0)  # first max wins on ties
                amax[bdx] = idx + s
                pooled[bdx] = seg[idx, np.arange(C)]
        za = pooled @ p["act0_W"] + p["act0_b"]
        ha = np.maximum(za, 0.0)
        actions = ha @ p["act1_W"] + p["act1_b"]
        zp = pooled @ p["pred0_W"] + p["pred0_b"]
        hp = np.maximum(zp, 0.0)
        preds = hp @ p["pred1_W"] + p["pred1_b"]
        nonempty = counts > 0
        actions[~nonempty] = 0.0
        preds[~nonempty] = 0.0
        cache = dict(zs=zs, hs=hs, pooled=pooled, amax=amax, za=za, ha=ha,
                     zp=zp, hp=hp, nonempty=nonempty)
        return actions, preds, cache

    def backward(self, cache, d_actions, d_preds):
        """Reverse pass; returns gradients keyed like the parameters."""
        p = self.params
        g = {}
        mask = cache["nonempty"][:, None]
        d_actions = np.where(mask, d_actions, 0.0)
        d_preds = np.where(mask, d_preds, 0.0)

        ha, hp, pooled = cache["ha"], cache["hp"], cache["pooled"]
        g["act1_W"] = ha.T @ d_actions
        g["act1_b"] = d_actions.sum(axis=0)
        dha = d_actions @ p["act1_W"].T
        dza = dha * (cache["za"] > 0)
        g["act0_W"] = pooled.T @ dza
        g["act0_b"] = dza.sum(axis=0)

        g["pred1_W"] = hp.T @ d_preds
        g["pred1_b"] = d_preds.sum(axis=0)
        dhp = d_preds @ p["pred1_W"].T
        dzp = dhp * (cache["zp"] > 0)
        g["pred0_W"] = pooled.T @ dzp
        g["pred0_b"] = dzp.sum(axis=0)

        dpool = dza @ p["act0_W"].T + dzp @ p["pred0_W"].T
        h_top = cache["hs"][3]
        dh = np.zeros_like(h_top)
        amax = cache["amax"]
        valid = amax[:, 0] >= 0
        if valid.any():
            rows = amax[valid].ravel()
            cols = np.tile(np.arange(h_top.shape[1]), int(valid.sum()))
            np.add.at(dh, (rows, cols), dpool[valid].ravel())
        for i in (2, 1, 0):
            dz = dh * (cache["zs"][i] > 0)
            g[f"enc{i}_W"] = cache["hs"][i].T @ dz
            g[f"enc{i}_b"] = dz.sum(axis=0)
            dh = dz @ p[f"enc{i}_W"].T
        return g

    def act(self, feats):
        """Action for a single observation's feature matrix (zeros if empty)."""
        feats = np.asarray(feats, dtype=float)
        if feats.size == 0:
            return np.zeros(6)
        if not np.all(np.isfinite(self.params_vector())):
            raise FloatingPointError("policy parameters are not finite")
        actions, _, _ = self.forward(feats, [len(feats)])
        return actions[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, net: PolicyNetwork, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(net.params[n]) for n in net.param_names}
        self.v = {n: np.zeros_like(net.params[n]) for n in net.param_names}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n in self.net.param_names:
            gr = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * gr
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * gr * gr
            update = (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + self.eps)
            self.net.params[n] -= self.lr * (update + self.wd * self.net.params[n])


# ---------------------------------------------------------------------------
# training data assembly
# ---------------------------------------------------------------------------

class TrainingSet:
    """Flattened (features, action, future-transform targets) frame pool."""

    def __init__(self, demos, cfg: TrainConfig):
        man = demos.manifest
        self.keypoints = np.array(man["gripper_keypoints"])
        tip = np.array(man["tip_point"])
        back = man["sim_config"]["cam_back_offset"]
        cam_in_ee = Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                         tip - np.array([0.0, 0.0, back]))
        mode, l1, l2 = cfg.feature_mode, cfg.l1, cfg.l2
        feats_list, actions, targets = [], [], []
        self._stack_src = [] if mode == "stack" else None
        for d in range(len(demos)):
            arr = demos.demo_arrays(d)
            counts = arr["counts"]
            offs = np.concatenate([[0], np.cumsum(counts)])
            n = len(counts)
            obj = [Pose.from_array(row) for row in arr["object_poses"]]
            cams = [Pose.from_array(row).compose(cam_in_ee) for row in arr["ee_poses"]]
            for t in range(n):
                if counts[t] == 0:
                    continue  # empty observations carry no training signal
                if mode == "flow":
                    f = arr["features"][offs[t]:offs[t + 1]].astype(float)
                elif mode == "current":
                    f = arr["features"][offs[t]:offs[t + 1], :FEATURE_BASE].astype(float)
                else:
                    f = self._build_stack(arr, offs, t, l1, cams)
                feats_list.append(f)
                actions.append(arr["actions"][t])
                targets.append(self._pred_target(obj, cams[t], t, n, l2))
        if not feats_list:
            raise ValueError("no non-empty frames in the demonstration set")
        self.counts = np.array([len(f) for f in feats_list])
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.features = np.concatenate(feats_list).astype(np.float64)
        self.actions = np.array(actions)
        self.targets = np.array(targets)
        self.input_dim = self.features.shape[1]

    @staticmethod
    def _pred_target(obj, cam_t, t, n, l2):
        """Future object transforms in the frame-t egocentric view, 6-vec each."""
        inv = cam_t.inverse()
        ego_t = inv.compose(obj[t])
        rows = []
        for i in range(1, l2 + 1):
            ego_s = inv.compose(obj[min(t + i, n - 1)])  # hold last pose at the end
            m = ego_s.compose(ego_t.inverse())
            rows.append(np.concatenate([m.t, rotvec_from_quat(m.q)]))
        return np.concatenate(rows)

    @staticmethod
    def _build_stack(arr, offs, t, l1, cams):
        from .percept import base_features
        rows = []
        eye = np.eye(l1 + 1)
        inv_t = cams[t].inverse()
        for age in range(0, l1 + 1):
            s = t - age
            if s < 0:
                continue
            pts = arr["points"][offs[s]:offs[s + 1]].astype(float)
            if len(pts) == 0:
                continue
            if age:
                pts = inv_t.transform(cams[s].transform(pts))
            labels = arr["labels"][offs[s]:offs[s + 1]]
            rows.append(np.concatenate([base_features(pts, labels),
                                        np.tile(eye[age], (len(pts), 1))], axis=1))
        return np.concatenate(rows)

    def __len__(self):
        return len(self.counts)

    def batch(self, idx):
        feats = np.concatenate([self.features[self.offsets[i]:self.offsets[i + 1]]
                                for i in idx])
        return feats, self.counts[idx], self.actions[idx], self.targets[idx]


def train(demos, cfg: TrainConfig, keypoints=None, callback=None):
    """Fit a policy on demonstration frames by stochastic gradient descent.

    Samples ``batch_size`` frames per iteration from the flattened pool.
    Deterministic for a fixed config: the same seed yields bit-identical
    parameters. Returns (network, per-iteration loss history).
    """
    data = demos if isinstance(demos, TrainingSet) else TrainingSet(demos, cfg)
    kp = data.keypoints if keypoints is None else np.asarray(keypoints)
    rng = np.random.default_rng(cfg.seed)
    net = PolicyNetwork(data.input_dim, l2=cfg.l2, rng=rng,
                        feature_mode=cfg.feature_mode, l1=cfg.l1, lam=cfg.lam)
    opt = AdamW(net, cfg.learning_rate, cfg.weight_decay)
    history = []
    n = len(data)
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        feats, counts, acts, targets = data.batch(idx)
        actions, preds, cache = net.forward(feats, counts)
        la, d_act = action_point_loss(actions, acts, kp)
        lp, d_pred = l1_loss(preds, targets)
        grads = net.backward(cache, d_act, cfg.lam * d_pred)
        opt.step(grads)
        history.append(la + cfg.lam * lp)
        if callback is not None and (it + 1) % cfg.log_every == 0:
            callback(it + 1, la, lp)
    return net, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"HPOL"
CKPT_SCHEMA = "policy/1"


def save_policy(path, net: PolicyNetwork, extra: dict | None = None):
    """Versioned binary checkpoint: JSON header + float64 LE parameter blob."""
    header = {
        "schema": CKPT_SCHEMA,
        "input_dim": net.input_dim,
        "l1": net.l1,
        "l2": net.l2,
        "lam": net.lam,
        "feature_mode": net.feature_mode,
        "encoder_widths": list(ENCODER_WIDTHS),
        "head_hidden": HEAD_HIDDEN,
        "param_names": net.param_names,
        "param_shapes": {n: list(net.params[n].shape) for n in net.param_names},
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode()
    blob = net.params_vector().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(blob)


def load_policy(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a policy checkpoint: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header["schema"] != CKPT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {header['schema']!r}")
        blob = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    net = PolicyNetwork(header["input_dim"], l2=header["l2"],
                        rng=np.random.default_rng(0),
                        feature_mode=header["feature_mode"], l1=header["l1"],
                        lam=header["lam"])
    net.set_params_vector(blob)
    return net, header


# ---------------------------------------------------------------------------
# closed-loop execution
# ---------------------------------------------------------------------------

def run_policy(policy, scene, trigger: GraspTrigger, sim_cfg, arm, seed: int = 0):
    """Observe -> features -> network action -> step, until trigger or timeout.

    ``policy`` needs ``act(features) -> 6-vector`` plus ``feature_mode``/``l1``
    attributes; empty observations map to a zero action.
    """
    rt = SceneRuntime(scene, arm, sim_cfg)
    mode = getattr(policy, "feature_mode", None)
    feature_fn = None
    if mode is not None:
        feature_fn = make_feature_fn(rt.camera_pose, mode, getattr(policy, "l1", 3))

    def controller(obs, state, feats):
        if len(obs) == 0:
            return Action.zero()
        mat = feats if feats is not None else obs.points
        return Action.from_array(policy.act(mat))

    result, _ = run_episode(rt, controller, trigger, seed=seed, feature_fn=feature_fn)
    return result
