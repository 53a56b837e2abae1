"""Regenerate plan_fixture.json and plan_golden.json.

Run from the repository root after an intentional change to planning numerics:

    python tests/data/make_plan_fixture.py
"""
import json
from pathlib import Path

import numpy as np

from warmstart_nav.actions import ActionBounds
from warmstart_nav.cli import run_plan_fixture
from warmstart_nav.experiment import dumps_json
from warmstart_nav.world_model import Encoder, EncoderSpec, PredictorSpec, WorldModel, init_params

HERE = Path(__file__).parent


def build():
    enc = Encoder(EncoderSpec(obs_dim=12, n_tokens=2, token_dim=4, seed=0))
    spec = PredictorSpec(2, 4, "mlp", hidden=8, layers=2, action_embed=4, context=3)
    params = init_params(spec, np.random.default_rng(0))
    bounds = ActionBounds(np.array([-0.1, -0.2, -0.3, 0.9]), np.array([0.5, 0.2, 0.3, 1.0]))
    wm = WorldModel(enc, spec, params, bounds)
    rng = np.random.default_rng(1)
    z_t = wm.encode(rng.standard_normal(12))
    z_g = wm.encode(rng.standard_normal(12))
    mu = np.round(rng.uniform(-0.5, 0.5, (8, 4)), 3)
    return {
        "world_model": wm.to_checkpoint(),
        "z_t": z_t.tolist(),
        "z_g": z_g.tolist(),
        "init": {"source": "policy", "mu": mu.tolist(), "sigma": np.full((8, 4), 0.03).tolist()},
        "planner": {"iterations": 4, "samples": 32, "elites": 4, "temperature": 0.8, "seed": 5},
    }


if __name__ == "__main__":
    (HERE / "plan_fixture.json").write_text(dumps_json(build()))
    (HERE / "plan_golden.json").write_text(dumps_json(run_plan_fixture(HERE / "plan_fixture.json")))
