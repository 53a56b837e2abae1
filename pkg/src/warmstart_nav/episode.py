"""Receding-horizon episode execution for the four planning methods."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .actions import denormalize_array, global_to_local
from .mppi import PlannerConfig, plan, policy_scoring_plan
from .prior import compute_prior, draw_policy_samples, transformed_samples, uninformed_init
from .sim import Instruction, Pose, SimParams, WorldSpec, expert_rollout, observe, step_dynamics


class Method(str, enum.Enum):
    POLICY_ONLY = "policy_only"
    UNINFORMED_MPPI = "uninformed_mppi"
    POLICY_SCORING = "policy_scoring"
    WARM_START_MPPI = "warm_start_mppi"


ALL_METHODS = tuple(Method)


@dataclass
class EpisodeConfig:
    max_steps: int = 25
    replan_interval: int = 1
    n_policy_samples: int = 4
    noise_scale: float = 0.1
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sim: SimParams = field(default_factory=SimParams)

    def validate(self):
        self.planner.validate()
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 1 <= self.replan_interval <= self.planner.horizon:
            raise ValueError("replan_interval must be in [1, horizon]")
        if self.n_policy_samples < 1:
            raise ValueError("n_policy_samples must be >= 1")


@dataclass
class EpisodeRecord:
    method: Method
    index: int
    instruction: Instruction
    start: Pose
    goal: Pose
    poses: np.ndarray       # executed, (T+1, 3)
    gt_poses: np.ndarray    # noise-free expert, (T+1, 3)
    replans: List[dict] = field(default_factory=list)
    policy_ms: List[float] = field(default_factory=list)
    plan_ms: List[float] = field(default_factory=list)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "method": self.method.value,
            "index": self.index,
            "instruction": self.instruction.to_dict(),
            "start": self.start.as_array().tolist(),
            "goal": self.goal.as_array().tolist(),
            "poses": self.poses.tolist(),
            "gt_poses": self.gt_poses.tolist(),
            "replans": self.replans,
        }
        if include_timings:
            d["timings_ms"] = {"policy": self.policy_ms, "planning": self.plan_ms}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        t = d.get("timings_ms", {})
        return cls(Method(d["method"]), int(d["index"]), Instruction.from_dict(d["instruction"]),
                   Pose.from_array(d["start"]), Pose.from_array(d["goal"]),
                   np.array(d["poses"], dtype=float), np.array(d["gt_poses"], dtype=float),
                   d.get("replans", []), t.get("policy", []), t.get("planning", []))


def check_compatible(wm, world: WorldSpec, cfg: EpisodeConfig):
    cfg.validate()
    if wm.encoder.spec.obs_dim != world.obs_dim:
        raise ValueError(f"world model expects {wm.encoder.spec.obs_dim} observation features, "
                         f"world produces {world.obs_dim}")
    if wm.bounds is None:
        raise ValueError("world model carries no action bounds")
    rc = wm.rollout_config
    if rc is not None and rc.horizon != cfg.planner.horizon:
        raise ValueError(f"world model was trained for horizon {rc.horizon}, "
                         f"planner uses {cfg.planner.horizon}")


def run_episode(method: Method, world: WorldSpec, wm, start: Pose, goal: Pose,
                instruction: Instruction, cfg: EpisodeConfig, rng: np.random.Generator,
                index: int = 0) -> EpisodeRecord:
    """Observe, plan, execute the first ``replan_interval`` actions, repeat until ``max_steps``.

    The reference trajectory is the noise-free expert from the same start, and the
    goal observation is rendered at its final pose.
    """
    method = Method(method)
    check_compatible(wm, world, cfg)
    H = cfg.planner.horizon
    sp = cfg.sim
    gt, _ = expert_rollout(start, goal, instruction, cfg.max_steps, H, sp)
    z_g = wm.encode(observe(gt[-1], world, sp.min_range))
    bounds = wm.bounds

    poses = [start]
    record = EpisodeRecord(method, index, instruction, start, goal, None, None)
    t = 0
    while t < cfg.max_steps:
        pose = poses[-1]
        t0 = time.perf_counter()
        samples = draw_policy_samples(pose, goal, instruction, cfg.n_policy_samples,
                                      cfg.noise_scale, rng, H, sp)
        t1 = time.perf_counter()
        info = {"t": t}
        if method is Method.POLICY_ONLY:
            actions = global_to_local(samples.chunks[0]).values
        else:
            z_t = wm.encode(observe(pose, world, sp.min_range))
            if method is Method.POLICY_SCORING:
                result = policy_scoring_plan(transformed_samples(samples, bounds), z_t, z_g, wm)
            else:
                if method is Method.WARM_START_MPPI:
                    init = compute_prior(samples, bounds, cfg.planner.sigma_min, cfg.planner.sigma_max)
                else:
                    init = uninformed_init(H, cfg.planner.sigma_max)
                result = plan(z_t, z_g, init, cfg.planner, wm, rng)
                info["best_cost"] = [it.best_cost for it in result.iterations]
                info["mean_elite_cost"] = [it.mean_elite_cost for it in result.iterations]
                info["prior_mu"] = init.mu.tolist()
                info["prior_sigma"] = init.sigma.tolist()
            info["chosen_cost"] = result.chosen_cost
            info["chosen_index"] = result.chosen_index
            actions = denormalize_array(result.chosen, bounds)
        t2 = time.perf_counter()
        record.policy_ms.append((t1 - t0) * 1e3)
        record.plan_ms.append((t2 - t1) * 1e3)
        record.replans.append(info)
        for a in actions[: min(cfg.replan_interval, cfg.max_steps - t)]:
            poses.append(step_dynamics(poses[-1], a))
            t += 1
    record.poses = np.stack([p.as_array() for p in poses])
    record.gt_poses = np.stack([p.as_array() for p in gt])
    return record


def path_bend(poses: np.ndarray, goal: Pose) -> float:
    """Mean signed offset (m) of the path from the start-to-goal chord, positive to the left.

    A path that curves left of the straight line to the goal bends positive. The
    net heading change is not used because the robot ends aligned with the goal
    heading, which hides the curvature of the approach.
    """
    xy = np.asarray(poses, dtype=float)[:, :2]
    chord = np.array([goal.x, goal.y]) - xy[0]
    norm = np.linalg.norm(chord)
    if norm == 0:
        return 0.0
    left = np.array([-chord[1], chord[0]]) / norm
    return float(np.mean((xy - xy[0]) @ left))


def instruction_match(record: EpisodeRecord, straight_tol: float = 0.25) -> bool:
    """Does the sign of the executed path bend agree with the instruction?

    Straight instructions match when the bend stays within ``straight_tol`` meters.
    """
    bend = path_bend(record.poses, record.goal)
    sign = record.instruction.turn_sign
    if sign == 0:
        return abs(bend) <= straight_tol
    return bend != 0 and math.copysign(1, bend) == sign
