import numpy as np
import pytest
from hypothesis import settings

from warmstart_nav.config import ExperimentConfig
from warmstart_nav.experiment import build_world, generate, train_model
from warmstart_nav.sim import WorldSpec, generate_dataset
from warmstart_nav.world_model import (
    Encoder, EncoderSpec, PredictorSpec, RolloutConfig, WorldModel, init_params,
)

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world():
    return WorldSpec.generate(0)


@pytest.fixture(scope="session")
def small_dataset(world):
    return generate_dataset(world, 6, 12, np.random.default_rng(3), noise_scale=0.15)


@pytest.fixture(scope="session")
def small_model(world, small_dataset):
    """Untrained narrow predictor: cheap, but has every code path of the real one."""
    enc = Encoder(EncoderSpec(world.obs_dim, n_tokens=2, token_dim=4, seed=1))
    spec = PredictorSpec(2, 4, "mlp", hidden=16, layers=3, action_embed=6, context=3)
    params = init_params(spec, np.random.default_rng(5))
    return WorldModel(enc, spec, params, small_dataset.bounds, RolloutConfig())


@pytest.fixture(scope="session")
def default_run():
    """World, dataset and world model trained with the default experiment config."""
    cfg = ExperimentConfig().validate()
    ds = generate(cfg)
    result = train_model(cfg, ds)
    return cfg, build_world(cfg), ds, result


SMALL_CONFIG = """\
seed = 3

[dataset]
n_episodes = 12
steps = 16

[predictor]
hidden = 32

[rollout]
epochs = 2

[evaluation]
n_episodes = 2
max_steps = 6
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture(scope="session")
def cli_pipeline():
    """Run generate, train and evaluate into ``out``; return the manifest as a dict."""
    import json
    from warmstart_nav.cli import main

    def run(config_path, out):
        for cmd in (["generate"], ["train", "--grad-check", "--weights", "100"],
                    ["evaluate", "--timing-sweep"]):
            code = main(cmd + ["--config", str(config_path), "--out", str(out)])
            assert code == 0, f"{cmd[0]} exited with {code}"
        return json.loads((out / "manifest.json").read_text())

    return run


@pytest.fixture
def acceptance():
    """Record one pass/fail line for a numbered criterion; returns the verdict."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record
