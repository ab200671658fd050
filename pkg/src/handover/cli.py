"""Command-line entry point.

Subcommands: ``gen-scenes``, ``gen-demos``, ``train``, ``eval``, ``replay``,
``report``. Exit codes: 0 ok, 1 runtime failure, 2 usage error. Every output
directory receives a manifest recording the resolved configuration, seed, and
input hashes; data files themselves are bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import expert as expert_mod
from . import learn as learn_mod
from . import scene as scene_mod
from . import sim as sim_mod
from .dataio import append_run_record, sha256_file, write_manifest
from .geom import Pose
from .kin import default_arm, load_arm
from .sim import EpisodeResult, Outcome, SimConfig, compute_metrics

DEFAULT_WORKERS = int(os.environ.get("HANDOVER_WORKERS", "1"))


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _sim_config(args) -> SimConfig:
    doc = _load_json(args.sim_config) if getattr(args, "sim_config", None) else {}
    if getattr(args, "obs_cap", None):
        doc["obs_cap"] = args.obs_cap
    return SimConfig(**doc)


def _arm(args, base_pose: Pose):
    arm = load_arm(args.arm) if getattr(args, "arm", None) else default_arm()
    return arm.with_base(base_pose)


def _trigger(args) -> learn_mod.GraspTrigger:
    return learn_mod.GraspTrigger(vicinity_radius=args.trigger_radius,
                                  point_count_threshold=args.trigger_count)


def _scene_base_pose(dataset: scene_mod.SceneDataset) -> Pose:
    cfg = dataset_config(dataset)
    return scene_mod.SceneGenConfig.from_dict(cfg).robot_base_pose if cfg \
        else scene_mod.SceneGenConfig().robot_base_pose


def dataset_config(dataset: scene_mod.SceneDataset):
    path = os.path.join(dataset.path, "manifest.json")
    if os.path.exists(path):
        return _load_json(path).get("config")
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = scene_mod.SceneGenConfig.from_dict(doc)
    scene_mod.generate_dataset(cfg, args.count, args.out, workers=args.workers)
    inputs = {args.config: sha256_file(args.config)} if args.config else {}
    append_run_record(args.out, "gen-scenes", cfg.to_dict(), cfg.seed, inputs)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _demo_worker(payload):
    (scenes_path, index, planner_doc, sim_doc, arm_path, trig, seed, record) = payload
    dataset = scene_mod.SceneDataset(scenes_path)
    sim_cfg = SimConfig(**sim_doc)
    arm = (load_arm(arm_path) if arm_path else default_arm()).with_base(
        _scene_base_pose(dataset))
    cfg = expert_mod.PlannerConfig(**planner_doc)
    trigger = learn_mod.GraspTrigger(*trig)
    return expert_mod.generate_demonstration(dataset[index], cfg, sim_cfg, arm,
                                             trigger, seed=seed ^ index, record=record)


def cmd_gen_demos(args) -> int:
    dataset = scene_mod.SceneDataset(args.scenes)
    count = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    planner_doc = {"strategy": args.strategy, "replan_period": args.period,
                   "step_length": args.step_length,
                   "error_threshold": args.threshold}
    sim_cfg = _sim_config(args)
    payloads = [(args.scenes, i, planner_doc, vars(sim_cfg), args.arm,
                 (args.trigger_radius, args.trigger_count), args.seed, True)
                for i in range(count)]
    if args.workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(args.workers) as pool:
            outs = pool.map(_demo_worker, payloads)
    else:
        outs = [_demo_worker(p) for p in payloads]
    results = [r for r, _ in outs]
    demos = [d for _, d in outs if d is not None]
    arm = _arm(args, _scene_base_pose(dataset))
    cfg = expert_mod.PlannerConfig(**planner_doc)
    expert_mod.write_demos(demos, args.out, sim_cfg, cfg, arm, args.seed, count,
                           results=results)
    report = compute_metrics(results, sim_cfg.t_max)
    append_run_record(args.out, "gen-demos",
                      {"planner": planner_doc, "sim": vars(sim_cfg),
                       "scenes": args.scenes, "count": count},
                      args.seed,
                      {args.scenes: sha256_file(os.path.join(args.scenes,
                                                             scene_mod.SCENES_JSONL))})
    print(f"{len(demos)}/{count} demonstrations succeeded "
          f"(S={report.S:.3f} T={report.T if report.T is None else round(report.T, 2)} "
          f"AS={report.AS:.3f}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = learn_mod.TrainConfig(**doc)
    demos = expert_mod.DemoDataset(args.demos)
    net, history = learn_mod.train(demos, cfg,
                                   callback=lambda it, la, lp: print(
                                       f"iter {it}: action {la:.4f} pred {lp:.4f}"))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    learn_mod.save_policy(args.out, net, extra={"train_config": vars(cfg),
                                                "final_loss": history[-1]})
    write_manifest(out_dir, {"schema": "policy-dir/1", "seed": cfg.seed,
                             "config": vars(cfg)})
    append_run_record(out_dir, "train", vars(cfg), cfg.seed,
                      {args.demos: sha256_file(os.path.join(args.demos,
                                                            expert_mod.DEMOS_JSONL))})
    print(f"trained {cfg.iterations} iterations; final loss {history[-1]:.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset = scene_mod.SceneDataset(args.scenes)
    count = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    sim_cfg = _sim_config(args)
    arm = _arm(args, _scene_base_pose(dataset))
    trigger = _trigger(args)
    results = []
    if args.policy.startswith("expert:"):
        strategy = args.policy.split(":", 1)[1]
        cfg = expert_mod.PlannerConfig(strategy=strategy, replan_period=args.period,
                                       step_length=args.step_length,
                                       error_threshold=args.threshold)
        for i in range(count):
            r, _ = expert_mod.generate_demonstration(dataset[i], cfg, sim_cfg, arm,
                                                     trigger, seed=args.seed ^ i,
                                                     record=False)
            results.append(r)
        desc = args.policy
    else:
        net, header = learn_mod.load_policy(args.policy)
        for i in range(count):
            results.append(learn_mod.run_policy(net, dataset[i], trigger, sim_cfg,
                                                arm, seed=args.seed ^ i))
        desc = os.path.basename(args.policy)
    report = compute_metrics(results, sim_cfg.t_max)
    doc = report.to_dict()
    doc.update({
        "policy": desc,
        "t_max": sim_cfg.t_max,
        "success_times": [r.success_time for r in results if r.success],
    })
    out_dir = os.path.dirname(os.path.abspath(args.report)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.report, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    append_run_record(out_dir, "eval",
                      {"policy": args.policy, "scenes": args.scenes, "count": count},
                      args.seed, {})
    print(f"{desc}: S={report.S:.3f} T={report.T} AS={report.AS:.3f} n={report.n_episodes}")
    return 0


def cmd_replay(args) -> int:
    demo_dir = os.path.dirname(os.path.abspath(args.trace))
    demos = expert_mod.DemoDataset(demo_dir)
    if not 0 <= args.index < len(demos):
        raise ValueError(f"demo index {args.index} out of range (n={len(demos)})")
    arr = demos.demo_arrays(args.index)
    man = demos.manifest
    tip = np.array(man["tip_point"])
    cam_in_ee = Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                     tip - np.array([0.0, 0.0, man["sim_config"]["cam_back_offset"]]))
    os.makedirs(args.out, exist_ok=True)
    offs = np.concatenate([[0], np.cumsum(arr["counts"])])
    for t in range(len(arr["counts"])):
        pts = arr["points"][offs[t]:offs[t + 1]].astype(float)
        cam = Pose.from_array(arr["ee_poses"][t]).compose(cam_in_ee)
        world = cam.transform(pts) if len(pts) else pts
        labels = arr["labels"][offs[t]:offs[t + 1]]
        _write_ply(os.path.join(args.out, f"frame_{t:06d}.ply"), world, labels)
    print(f"wrote {len(arr['counts'])} PLY frames to {args.out}")
    return 0


def _write_ply(path, points, labels):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar label\nend_header\n")
        for p, lab in zip(points, labels):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(lab)}\n")


def emit_success_curve(success_times, n_episodes: int, bins: int, t_max: float):
    """Step-function samples of the success rate over normalized time.

    Sampled at the right edge of each bin with the strict convention: an
    episode counts at time fraction t only when success_time < t * t_max.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    times = np.asarray(sorted(success_times), dtype=float)
    rows = []
    for k in range(1, bins + 1):
        frac = k / bins
        rows.append((frac, float(np.sum(times < frac * t_max)) / n_episodes))
    return rows


def cmd_report(args) -> int:
    docs = [_load_json(p) for p in args.results]
    lines = ["strategy,S,T,AS,n"]
    for doc in docs:
        t = "" if doc.get("T") is None else f"{doc['T']:.4f}"
        lines.append(f"{doc['policy']},{doc['S']:.4f},{t},{doc['AS']:.4f},{doc['n']}")
    with open(args.csv, "w") as f:
        f.write("\n".join(lines) + "\n")
    if args.curve:
        curves = ["strategy,t_frac,success"]
        for doc in docs:
            rows = emit_success_curve(doc.get("success_times", []), doc["n"],
                                      args.bins, doc.get("t_max", 13.0))
            curves += [f"{doc['policy']},{f:.6f},{s:.6f}" for f, s in rows]
        with open(args.curve, "w") as f:
            f.write("\n".join(curves) + "\n")
    print(f"wrote {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _add_sim_flags(p):
    p.add_argument("--sim-config", help="JSON file of simulator overrides")
    p.add_argument("--obs-cap", type=int, help="observation point cap")
    p.add_argument("--arm", help="arm description JSON")
    p.add_argument("--trigger-radius", type=float, default=0.03)
    p.add_argument("--trigger-count", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="handover",
                                 description="handover scenes, demonstrations, and policies")
    sub = ap.add_subparsers(dest="cmd")

    p = sub.add_parser("gen-scenes", help="synthesize a scene dataset")
    p.add_argument("--config", help="JSON scene-generation config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    p.add_argument("--scenes", required=True)
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in expert_mod.Strategy])
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--step-length", type=float, default=0.03)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    _add_sim_flags(p)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="train a policy on demonstrations")
    p.add_argument("--demos", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy or expert over scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--policy", required=True,
                   help="checkpoint path or expert:{destination,dense,landmark}")
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--step-length", type=float, default=0.03)
    p.add_argument("--threshold", type=float, default=0.05)
    _add_sim_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="dump a recorded demo as ASCII PLY frames")
    p.add_argument("--trace", required=True, help="path to a demos.jsonl file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="aggregate eval reports into CSV")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--curve", help="also emit a success-over-time CSV")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return ap


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
