"""Command-line entry points: generate, train, evaluate, plan, grad-check.

Exit codes: 0 success, 2 configuration or schema error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .episode import Method
from .experiment import (
    RunManifest, dumps_json, evaluate, generate, linear_fit, loss_curve_csv, timing_sweep,
    train_model, worker_count, write_evaluation, build_world, _csv,
)
from .mppi import PlannerConfig, plan
from .prior import PriorStats, uninformed_init
from .sim import Dataset
from .world_model import NumericError, WorldModel, encode_dataset, gradient_check, make_segments

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRAD_TOL = 1e-4

log = logging.getLogger("warmstart_nav")


# -- helpers -------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed_override", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed_override)
    if getattr(args, "methods", None):
        cfg.evaluation.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "greedy_elite", False):
        cfg.planner.greedy = True
    return cfg.validate()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path: Path, what: str) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: malformed {what}: {e.msg}") from None


def load_checkpoint(path) -> WorldModel:
    return WorldModel.from_checkpoint(_read_json(Path(path), "checkpoint"))


def load_dataset(path) -> Dataset:
    return Dataset.from_dict(_read_json(Path(path), "dataset"))


# -- commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = generate(cfg)
    manifest = RunManifest.start(out, cfg)
    (out / "dataset.json").write_text(dumps_json(ds.to_dict()))
    (out / "config.json").write_text(cfg.to_json())
    manifest.record(out, "dataset.json")
    manifest.record(out, "config.json")
    manifest.write(out)
    log.info("wrote %d episodes to %s", len(ds.episodes), out / "dataset.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(args.dataset or out / "dataset.json")
    result = train_model(cfg, ds, on_epoch=lambda e, t, v: log.info("epoch %d train %.5f val %s", e, t, v))
    manifest = RunManifest.start(out, cfg)
    (out / "checkpoint.json").write_text(dumps_json(result.model.to_checkpoint()))
    (out / "loss_curve.csv").write_text(loss_curve_csv(result))
    for rel in ("checkpoint.json", "loss_curve.csv"):
        manifest.record(out, rel)
    if "checkpoint.json" not in manifest.checkpoints:
        manifest.checkpoints.append("checkpoint.json")
    code = EXIT_OK
    if args.grad_check:
        report = _grad_check(cfg, result.model, ds, args.weights)
        (out / "grad_check.json").write_text(dumps_json(report))
        manifest.record(out, "grad_check.json")
        code = EXIT_OK if report["max_rel_error"] < GRAD_TOL else EXIT_NUMERIC
    manifest.write(out)
    return code


def _grad_check(cfg: ExperimentConfig, wm: WorldModel, ds: Dataset, n_weights: int) -> dict:
    flat, acts = encode_dataset(wm, ds)
    Z, A = make_segments(flat[:2], acts[:2], cfg.rollout.k_roll)
    Z, A = Z[:4], A[:4]
    rep = gradient_check(wm.params, Z, A, wm.spec, cfg.rollout, n_weights=n_weights,
                         rng=cfg.rng(cfg.rollout.seed, 99))
    return {"max_rel_error": rep.max_rel_error, "n_checked": rep.n_checked,
            "worst": {"weight": rep.worst[1], "index": rep.worst[2],
                      "analytic": rep.worst[3], "numeric": rep.worst[4]},
            "tolerance": GRAD_TOL, "passed": rep.max_rel_error < GRAD_TOL}


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        wm = load_checkpoint(args.checkpoint)
        small = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, n_episodes=2))
        ds = generate(small)
    else:
        small = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, n_episodes=2),
                                    rollout=dataclasses.replace(cfg.rollout, epochs=0))
        ds = generate(small)
        wm = train_model(small, ds).model
    report = _grad_check(cfg, wm, ds, args.weights)
    sys.stdout.write(dumps_json(report))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    wm = load_checkpoint(args.checkpoint or out / "checkpoint.json")
    world = build_world(cfg)
    records = evaluate(cfg, wm, world, workers=worker_count())
    manifest = RunManifest.start(out, cfg)
    table = write_evaluation(out, cfg, records, manifest)
    if args.timing_sweep:
        rows = timing_sweep(wm, world, seed=cfg.seed, base=cfg.planner)
        slope, intercept, r2 = linear_fit([r["work"] for r in rows], [r["plan_ms"] for r in rows])
        body = _csv([[r["iterations"], r["samples"], r["work"], repr(r["plan_ms"])] for r in rows],
                    ["iterations", "samples", "work", "plan_ms"])
        body += f"# fit plan_ms = {slope:.6g} * J*N + {intercept:.6g}, R^2 = {r2:.4f}\n"
        (out / "timing_sweep.csv").write_text(body)
        manifest.record(out, "timing_sweep.csv", volatile=True)
    manifest.write(out)
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _fixture_array(d: dict, key: str, shape=None) -> np.ndarray:
    if key not in d:
        raise ConfigError(f"plan fixture is missing {key!r}")
    arr = np.asarray(d[key], dtype=float)
    if shape is not None and arr.shape != tuple(shape):
        raise ConfigError(f"plan fixture {key!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def run_plan_fixture(path: Path, greedy: bool = False) -> dict:
    """Load a planning problem, solve it, and return the JSON-ready result."""
    path = Path(path)
    d = _read_json(path, "plan fixture")
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: plan fixture must be a JSON object")
    if "world_model" in d:
        wm = WorldModel.from_checkpoint(d["world_model"])
    elif "checkpoint" in d:
        wm = load_checkpoint(path.parent / d["checkpoint"])
    else:
        raise ConfigError("plan fixture needs an inline 'world_model' or a 'checkpoint' path")
    try:
        cfg = PlannerConfig(**d.get("planner", {}))
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"plan fixture 'planner': {e}") from None
    if greedy:
        cfg.greedy = True
    shape = wm.latent_shape
    z_t = _fixture_array(d, "z_t", shape)
    z_g = _fixture_array(d, "z_g", shape)
    init_d = d.get("init", {"source": "uninformed"})
    if init_d.get("source") == "uninformed":
        init = uninformed_init(cfg.horizon, cfg.sigma_max)
    else:
        try:
            init = PriorStats.from_dict(init_d)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"plan fixture 'init': {e}") from None
    result = plan(z_t, z_g, init, cfg, wm, np.random.default_rng(cfg.seed))
    return {"format_version": 1, "kind": "plan_result", "planner": dataclasses.asdict(cfg),
            **result.to_dict()}


def cmd_plan(args) -> int:
    text = dumps_json(run_plan_fixture(Path(args.fixture), args.greedy_elite))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warmstart-nav", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON experiment config (defaults if omitted)")
        sp.add_argument("--out", help="output directory (overrides out_dir in the config)")
        sp.add_argument("--seed-override", type=int, help="replace the master seed")

    sp = sub.add_parser("generate", help="simulate expert demonstrations")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="fit the latent predictor on a dataset")
    common(sp)
    sp.add_argument("--dataset", help="dataset file (default: <out>/dataset.json)")
    sp.add_argument("--grad-check", action="store_true", help="also finite-difference check gradients")
    sp.add_argument("--weights", type=int, default=120, help="weights sampled by the gradient check")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="paired evaluation of planning methods")
    common(sp)
    sp.add_argument("--checkpoint", help="world model checkpoint (default: <out>/checkpoint.json)")
    sp.add_argument("--methods", help="comma-separated subset of: "
                    + ", ".join(m.value for m in Method))
    sp.add_argument("--greedy-elite", action="store_true", help="execute the top elite, not a sampled one")
    sp.add_argument("--timing-sweep", action="store_true", help="also time planning over a J x N grid")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plan", help="solve one planning problem from a fixture file")
    sp.add_argument("fixture")
    sp.add_argument("--out", help="write the result here instead of stdout")
    sp.add_argument("--greedy-elite", action="store_true")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("grad-check", help="finite-difference check of rollout-loss gradients")
    common(sp)
    sp.add_argument("--checkpoint", help="check this model instead of a fresh initialization")
    sp.add_argument("--weights", type=int, default=120)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
