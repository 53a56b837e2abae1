"""Sampling-based planning over the latent world model.

Three planning modes share the terminal latent-distance cost: MPPI from a
policy prior, MPPI from a zero-mean prior, and best-of-N policy sample scoring.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .prior import SIGMA_MAX, SIGMA_MIN, PriorStats
from .world_model import NumericError


class PlanMode(str, enum.Enum):
    WARM_START = "warm_start_mppi"
    UNINFORMED = "uninformed_mppi"
    POLICY_SCORING = "policy_scoring"


@dataclass
class PlannerConfig:
    iterations: int = 4          # J
    samples: int = 32            # N
    elites: int = 4              # K
    temperature: float = 0.8     # lambda (inverse temperature)
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    horizon: int = 8
    seed: int = 0
    reinject_elite: bool = True
    greedy: bool = False

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.elites <= self.samples:
            raise ValueError("need 1 <= elites <= samples")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class EliteSet:
    chunks: np.ndarray    # (K, H, 4)
    costs: np.ndarray     # (K,), ascending
    weights: np.ndarray   # (K,)
    indices: np.ndarray   # candidate indices within the iteration

    def to_dict(self):
        return {"indices": self.indices.tolist(), "costs": self.costs.tolist(),
                "weights": self.weights.tolist()}


@dataclass
class IterationRecord:
    best_cost: float
    mean_elite_cost: float
    elites: EliteSet

    def to_dict(self):
        return {"best_cost": self.best_cost, "mean_elite_cost": self.mean_elite_cost,
                "elites": self.elites.to_dict()}


@dataclass
class PlanResult:
    chosen: np.ndarray    # (H, 4) normalized local actions
    chosen_cost: float
    mode: PlanMode
    mu: np.ndarray
    sigma: np.ndarray
    init: Optional[PriorStats] = None
    iterations: List[IterationRecord] = field(default_factory=list)
    chosen_index: int = 0
    reinjected: bool = False

    def to_dict(self, include_init: bool = True) -> dict:
        d = {
            "mode": self.mode.value,
            "chosen": self.chosen.tolist(),
            "chosen_cost": self.chosen_cost,
            "chosen_index": self.chosen_index,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "elite_reinjection": self.reinjected,
            "iterations": [it.to_dict() for it in self.iterations],
        }
        if include_init and self.init is not None:
            d["init"] = self.init.to_dict()
        return d


def latent_cost(z_pred: np.ndarray, z_goal: np.ndarray) -> np.ndarray:
    """Mean over tokens of the squared token distance. z_pred: (..., n, d)."""
    diff = z_pred - z_goal
    return np.sum(diff * diff, axis=(-2, -1)) / z_goal.shape[-2]


def score_batch(z_t: np.ndarray, chunks: np.ndarray, z_g: np.ndarray, wm) -> np.ndarray:
    if z_g.shape != tuple(wm.latent_shape) or np.asarray(z_t).shape[-2:] != tuple(wm.latent_shape):
        raise ValueError(f"latent shape mismatch: model uses {wm.latent_shape}")
    return latent_cost(wm.terminal_batch(z_t, chunks), z_g)


def score_candidate(z_t: np.ndarray, chunk, z_g: np.ndarray, wm) -> float:
    values = getattr(chunk, "values", chunk)
    return float(score_batch(z_t, np.asarray(values)[None], z_g, wm)[0])


def elite_weights(costs, temperature: float) -> np.ndarray:
    """Softmax of temperature * (c_min - c_k), computed relative to the best cost."""
    c = np.asarray(costs, dtype=float)
    if c.size == 0:
        raise ValueError("need at least one cost")
    if not np.all(np.isfinite(c)):
        raise NumericError("non-finite elite cost")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits = temperature * (c.min() - c)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def update_distribution(elites: EliteSet, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX):
    w = elites.weights[:, None, None]
    mu = np.sum(w * elites.chunks, axis=0)
    var = np.sum(w * (elites.chunks - mu) ** 2, axis=0)
    return mu, np.clip(np.sqrt(var), sigma_min, sigma_max)


def sample_candidates(mu: np.ndarray, sigma: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal((n,) + mu.shape)
    return np.clip(mu + sigma * eps, -1.0, 1.0)


def select_elites(candidates: np.ndarray, costs: np.ndarray, k: int, temperature: float) -> EliteSet:
    if np.any(np.isnan(costs)):
        raise NumericError("NaN candidate cost")
    order = np.argsort(costs, kind="stable")[:k]
    ec = costs[order]
    return EliteSet(candidates[order], ec, elite_weights(ec, temperature), order)


def plan(z_t: np.ndarray, z_g: np.ndarray, init: PriorStats, cfg: PlannerConfig, wm,
         rng: np.random.Generator, first_candidates: Optional[np.ndarray] = None) -> PlanResult:
    """Iterative sample / score / reweight refinement, then one elite drawn by weight.

    With ``reinject_elite`` the previous iteration's best elite replaces the first
    fresh sample, which makes the best elite cost non-increasing across iterations.
    ``first_candidates`` replaces the sampled set of the first iteration.
    """
    cfg.validate()
    if init.mu.shape != (cfg.horizon, 4) or init.sigma.shape != (cfg.horizon, 4):
        raise ValueError(f"init shape {init.mu.shape} does not match horizon {cfg.horizon}")
    mu, sigma = init.mu.copy(), init.sigma.copy()
    records: List[IterationRecord] = []
    best_prev = None
    elites = None
    for j in range(cfg.iterations):
        if j == 0 and first_candidates is not None:
            cand = np.asarray(first_candidates, dtype=float)
        else:
            cand = sample_candidates(mu, sigma, cfg.samples, rng)
            if cfg.reinject_elite and best_prev is not None:
                cand[0] = best_prev
        costs = score_batch(z_t, cand, z_g, wm)
        elites = select_elites(cand, costs, min(cfg.elites, len(cand)), cfg.temperature)
        mu, sigma = update_distribution(elites, cfg.sigma_min, cfg.sigma_max)
        best_prev = elites.chunks[0].copy()
        records.append(IterationRecord(float(elites.costs[0]), float(elites.costs.mean()), elites))
    if cfg.greedy:
        k_star = int(np.argmax(elites.weights))
    else:
        k_star = int(rng.choice(len(elites.weights), p=elites.weights))
    mode = PlanMode.UNINFORMED if init.source == "uninformed" else PlanMode.WARM_START
    return PlanResult(elites.chunks[k_star].copy(), float(elites.costs[k_star]), mode, mu, sigma,
                      init, records, k_star, cfg.reinject_elite)


def policy_scoring_plan(samples: np.ndarray, z_t: np.ndarray, z_g: np.ndarray, wm) -> PlanResult:
    """Score each transformed policy sample with a full rollout and keep the cheapest."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ValueError("need at least one sample of shape (H, 4)")
    costs = score_batch(z_t, samples, z_g, wm)
    if np.any(np.isnan(costs)):
        raise NumericError("NaN candidate cost")
    best = int(np.argmin(costs))  # first index on ties
    return PlanResult(samples[best].copy(), float(costs[best]), PlanMode.POLICY_SCORING,
                      samples.mean(axis=0), samples.std(axis=0), None, [], best, False)
