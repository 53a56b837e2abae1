"""2D kinematic navigation world: dynamics, landmark observations, expert policy."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .actions import (
    COS, DX, DY, SIN, ActionBounds, ActionChunk, Frame, compute_bounds,
    global_to_local, normalize_array,
)

DATASET_FORMAT_VERSION = 1


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(float(a[0]), float(a[1]), float(a[2]))


class InstructionKind(str, enum.Enum):
    STRAIGHT = "straight"
    CURVE_LEFT = "curve_left"
    CURVE_RIGHT = "curve_right"


@dataclass(frozen=True)
class Instruction:
    kind: InstructionKind
    strength: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", InstructionKind(self.kind))
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"instruction strength must be in [0, 1], got {self.strength}")

    @property
    def turn_sign(self) -> int:
        return {InstructionKind.STRAIGHT: 0, InstructionKind.CURVE_LEFT: 1,
                InstructionKind.CURVE_RIGHT: -1}[self.kind]

    def to_dict(self):
        return {"kind": self.kind.value, "strength": self.strength}

    @classmethod
    def from_dict(cls, d):
        return cls(InstructionKind(d["kind"]), float(d["strength"]))


@dataclass(frozen=True)
class SimParams:
    v_max: float = 0.5          # m / step
    phi_max: float = 0.3        # rad / step
    heading_gain: float = 0.5
    speed_gain: float = 0.5
    turn_radius: float = 1.0    # m, steering blends toward the goal heading inside this distance
    arrival_radius: float = 0.25  # m, pure heading alignment inside this distance
    min_range: float = 0.1      # m, clamps inverse distance
    goal_distance: tuple = (2.0, 5.0)
    goal_bearing: float = math.pi / 3
    strength_range: tuple = (0.2, 0.8)


@dataclass(frozen=True)
class WorldSpec:
    landmarks: np.ndarray  # (L, 2)
    arena_half_width: float = 10.0
    seed: int = 0

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=float)
        if lm.ndim != 2 or lm.shape[1] != 2 or lm.shape[0] < 4:
            raise ValueError("a world needs at least 4 landmarks of shape (L, 2)")
        if np.any(np.abs(lm) > self.arena_half_width):
            raise ValueError("landmarks must lie inside the arena")
        if len({tuple(p) for p in lm}) != len(lm):
            raise ValueError("landmarks must be pairwise distinct")
        object.__setattr__(self, "landmarks", lm)

    @property
    def obs_dim(self) -> int:
        return 3 * self.landmarks.shape[0]

    @classmethod
    def generate(cls, seed: int, n_landmarks: int = 8, arena_half_width: float = 10.0) -> "WorldSpec":
        rng = np.random.default_rng(seed)
        lm = rng.uniform(-arena_half_width, arena_half_width, size=(n_landmarks, 2))
        return cls(lm, arena_half_width, seed)

    def to_dict(self):
        return {"landmarks": self.landmarks.tolist(), "arena_half_width": self.arena_half_width,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["landmarks"], dtype=float), float(d["arena_half_width"]), int(d["seed"]))


def step_dynamics(pose: Pose, action) -> Pose:
    """Apply one physical body-frame action."""
    a = np.asarray(action, dtype=float)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x = pose.x + c * a[DX] - s * a[DY]
    y = pose.y + s * a[DX] + c * a[DY]
    return Pose(float(x), float(y), pose.heading + math.atan2(a[SIN], a[COS]))


def observe(pose: Pose, world: WorldSpec, min_range: float = 0.1) -> np.ndarray:
    """Body-frame landmark offsets and inverse distances, flattened as (dx, dy, 1/r) per landmark."""
    rel = world.landmarks - np.array([pose.x, pose.y])
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    bx = c * rel[:, 0] + s * rel[:, 1]
    by = -s * rel[:, 0] + c * rel[:, 1]
    inv = 1.0 / np.maximum(np.hypot(rel[:, 0], rel[:, 1]), min_range)
    return np.stack([bx, by, inv], axis=1).reshape(-1)


def expert_policy(pose: Pose, goal: Pose, instruction: Instruction, noise_scale: float,
                  rng: Optional[np.random.Generator], horizon: int = 8,
                  params: SimParams = SimParams()) -> ActionChunk:
    """Proportional go-to-goal controller with an instruction turn bias.

    Between ``turn_radius`` and ``arrival_radius`` the steering target blends
    from the goal bearing to the goal heading. Speed scales with how well the
    robot faces the goal, so it settles at the goal pose instead of circling.

    Plans ``horizon`` steps on its own noise-free internal rollout and returns
    the displacements in the frame of the robot at the chunk start, with
    Gaussian noise added to every component afterwards.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    bias = instruction.turn_sign * instruction.strength * params.phi_max
    x, y, th = pose.x, pose.y, pose.heading
    out = np.empty((horizon, 4))
    for t in range(horizon):
        dist = math.hypot(goal.x - x, goal.y - y)
        err = wrap_angle(math.atan2(goal.y - y, goal.x - x) - th) if dist > 1e-12 else 0.0
        fade = float(np.clip((dist - params.arrival_radius)
                             / (params.turn_radius - params.arrival_radius), 0.0, 1.0))
        align = wrap_angle(goal.heading - th)
        steer = params.heading_gain * (fade * err + (1.0 - fade) * align) + fade * bias
        dphi = float(np.clip(steer, -params.phi_max, params.phi_max))
        speed = min(params.v_max, params.speed_gain * dist) * max(0.0, math.cos(err))
        lx, ly = speed * math.cos(0.5 * dphi), speed * math.sin(0.5 * dphi)
        rel = th - pose.heading
        cr, sr = math.cos(rel), math.sin(rel)
        out[t] = (cr * lx - sr * ly, sr * lx + cr * ly, math.sin(dphi), math.cos(dphi))
        cw, sw = math.cos(th), math.sin(th)
        x, y = x + cw * lx - sw * ly, y + sw * lx + cw * ly
        th = th + dphi
    if noise_scale > 0:
        out += noise_scale * rng.standard_normal(out.shape)
        norm = np.hypot(out[:, SIN], out[:, COS])
        zero = norm == 0
        norm[zero] = 1.0
        out[:, SIN] /= norm
        out[:, COS] /= norm
        out[zero, SIN], out[zero, COS] = 0.0, 1.0
        disp = np.hypot(out[:, DX], out[:, DY])
        scale = np.minimum(1.0, params.v_max / np.maximum(disp, 1e-300))
        out[:, DX] *= scale
        out[:, DY] *= scale
    return ActionChunk(out, Frame.GLOBAL, normalized=False)


def sample_task(world: WorldSpec, rng: np.random.Generator, params: SimParams = SimParams()):
    """Random start pose, goal point ahead of it, and instruction."""
    half = 0.6 * world.arena_half_width
    start = Pose(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-np.pi, np.pi))
    dist = rng.uniform(*params.goal_distance)
    bearing = start.heading + rng.uniform(-params.goal_bearing, params.goal_bearing)
    goal = Pose(start.x + dist * math.cos(bearing), start.y + dist * math.sin(bearing), bearing)
    kind = list(InstructionKind)[rng.integers(3)]
    instruction = Instruction(kind, float(rng.uniform(*params.strength_range)))
    return start, goal, instruction


def expert_rollout(start: Pose, goal: Pose, instruction: Instruction, steps: int,
                   horizon: int = 8, params: SimParams = SimParams(),
                   noise_scale: float = 0.0, rng=None):
    """Closed-loop expert execution (first action of every chunk). Returns poses and local actions."""
    poses = [start]
    actions = []
    for _ in range(steps):
        chunk = expert_policy(poses[-1], goal, instruction, noise_scale, rng, horizon, params)
        a = global_to_local(chunk).values[0]
        actions.append(a)
        poses.append(step_dynamics(poses[-1], a))
    return poses, np.array(actions).reshape(steps, 4)


@dataclass
class Trajectory:
    poses: np.ndarray         # (T+1, 3)
    observations: np.ndarray  # (T+1, m)
    actions: np.ndarray       # (T, 4) physical, local frame
    instruction: Instruction

    def __len__(self):
        return self.actions.shape[0]


@dataclass
class Dataset:
    world: WorldSpec
    episodes: List[Trajectory]
    bounds: ActionBounds
    meta: dict = field(default_factory=dict)

    def normalized_actions(self, i: int) -> np.ndarray:
        return normalize_array(self.episodes[i].actions, self.bounds)

    def check_consistency(self, min_range: float = 0.1):
        """Every transition must satisfy observe(step_dynamics(pose, a)) exactly."""
        for k, ep in enumerate(self.episodes):
            for t in range(len(ep) + 1):
                pose = Pose.from_array(ep.poses[t])
                if t > 0:
                    nxt = step_dynamics(Pose.from_array(ep.poses[t - 1]), ep.actions[t - 1])
                    if not np.array_equal(nxt.as_array(), ep.poses[t]):
                        raise ValueError(f"episode {k} step {t}: pose does not follow the dynamics")
                if not np.array_equal(observe(pose, self.world, min_range), ep.observations[t]):
                    raise ValueError(f"episode {k} step {t}: observation mismatch")

    def to_dict(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "kind": "dataset",
            "world": self.world.to_dict(),
            "bounds": self.bounds.to_dict(),
            "meta": self.meta,
            "episodes": [
                {"poses": ep.poses.tolist(), "actions": ep.actions.tolist(),
                 "instruction": ep.instruction.to_dict()}
                for ep in self.episodes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        if d.get("kind") != "dataset" or d.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError("not a dataset file of a supported version")
        world = WorldSpec.from_dict(d["world"])
        episodes = []
        for e in d["episodes"]:
            poses = np.array(e["poses"], dtype=float)
            obs = np.stack([observe(Pose.from_array(p), world) for p in poses])
            episodes.append(Trajectory(poses, obs, np.array(e["actions"], dtype=float).reshape(-1, 4),
                                       Instruction.from_dict(e["instruction"])))
        ds = cls(world, episodes, ActionBounds.from_dict(d["bounds"]), d.get("meta", {}))
        ds.check_consistency()
        return ds


def generate_dataset(world: WorldSpec, n_episodes: int, steps: int, rng: np.random.Generator,
                     noise_scale: float = 0.15, horizon: int = 8,
                     params: SimParams = SimParams()) -> Dataset:
    """Noisy closed-loop expert episodes from random starts toward random goals."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    episodes = []
    for _ in range(n_episodes):
        start, goal, instruction = sample_task(world, rng, params)
        poses, actions = expert_rollout(start, goal, instruction, steps, horizon, params,
                                        noise_scale, rng)
        arr = np.stack([p.as_array() for p in poses])
        obs = np.stack([observe(p, world, params.min_range) for p in poses])
        episodes.append(Trajectory(arr, obs, actions, instruction))
    bounds = compute_bounds(np.concatenate([e.actions for e in episodes]))
    meta = {"steps": steps, "noise_scale": noise_scale, "horizon": horizon}
    return Dataset(world, episodes, bounds, meta)
