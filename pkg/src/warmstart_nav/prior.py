"""Warm-start distribution from stochastic policy samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .actions import ACTION_DIM, ActionBounds, ActionChunk, Frame, to_planner_space
from .sim import Instruction, Pose, SimParams, expert_policy

SIGMA_MIN = 0.01
SIGMA_MAX = 0.05
N_POLICY_SAMPLES = 4


@dataclass
class PriorStats:
    mu: np.ndarray      # (H, 4), normalized units
    sigma: np.ndarray   # (H, 4)
    source: str = "policy"

    @property
    def horizon(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {"source": self.source, "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorStats":
        mu = np.array(d["mu"], dtype=float)
        sigma = np.array(d["sigma"], dtype=float)
        if mu.ndim != 2 or mu.shape[1] != ACTION_DIM or sigma.shape != mu.shape:
            raise ValueError("prior mu and sigma must both have shape (H, 4)")
        return cls(mu, sigma, d.get("source", "policy"))


def uninformed_init(horizon: int, sigma_max: float = SIGMA_MAX) -> PriorStats:
    """Zero mean at the widest allowed spread."""
    return PriorStats(np.zeros((horizon, ACTION_DIM)), np.full((horizon, ACTION_DIM), sigma_max),
                      source="uninformed")


@dataclass
class PolicySamples:
    chunks: List[ActionChunk]   # physical, global frame
    instruction: Instruction

    def __post_init__(self):
        if not self.chunks:
            raise ValueError("need at least one policy sample")
        if len({c.horizon for c in self.chunks}) != 1:
            raise ValueError("policy samples must share a horizon")


def draw_policy_samples(pose: Pose, goal: Pose, instruction: Instruction, n_samples: int,
                        noise_scale: float, rng: np.random.Generator, horizon: int = 8,
                        params: SimParams = SimParams()) -> PolicySamples:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    chunks = [expert_policy(pose, goal, instruction, noise_scale, rng, horizon, params)
              for _ in range(n_samples)]
    return PolicySamples(chunks, instruction)


def transformed_samples(samples: PolicySamples, bounds: ActionBounds) -> np.ndarray:
    """(N_pi, H, 4) samples in the planner's normalized local space."""
    if not isinstance(bounds, ActionBounds):
        raise TypeError("bounds must be ActionBounds")
    return np.stack([to_planner_space(c, bounds).values for c in samples.chunks])


def compute_prior(samples: PolicySamples, bounds: ActionBounds, sigma_min: float = SIGMA_MIN,
                  sigma_max: float = SIGMA_MAX) -> PriorStats:
    """Transform every sample first, then take the mean and population std."""
    if not 0 < sigma_min <= sigma_max:
        raise ValueError("need 0 < sigma_min <= sigma_max")
    x = transformed_samples(samples, bounds)
    mu = x.mean(axis=0)
    sigma = np.clip(x.std(axis=0), sigma_min, sigma_max)
    return PriorStats(mu, sigma, source="policy")
