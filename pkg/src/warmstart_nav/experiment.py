"""Orchestration shared by the CLI and the acceptance tests: data, training, paired evaluation, reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .episode import ALL_METHODS, EpisodeRecord, Method, instruction_match, run_episode
from .metrics import MetricTable, aggregate
from .mppi import PlannerConfig, plan
from .prior import uninformed_init
from .sim import Dataset, WorldSpec, generate_dataset, observe, sample_task
from .world_model import TrainingResult, WorldModel, train

WORKERS_ENV = "WARMSTART_NAV_WORKERS"
MANIFEST_NAME = "manifest.json"

# stream tags under the master seed
_TASK_STREAM, _EPISODE_STREAM, _SWEEP_STREAM = 0, 1, 2


def build_world(cfg: ExperimentConfig) -> WorldSpec:
    w = cfg.world
    return WorldSpec.generate(cfg.world_seed(), w.n_landmarks, w.arena_half_width)


def generate(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    return generate_dataset(build_world(cfg), d.n_episodes, d.steps, cfg.rng(d.seed),
                            d.noise_scale, cfg.rollout.horizon)


def train_model(cfg: ExperimentConfig, dataset: Dataset, on_epoch=None) -> TrainingResult:
    return train(dataset, cfg.rollout, cfg.rng(cfg.rollout.seed),
                 cfg.encoder_spec(dataset.world.obs_dim), cfg.predictor_spec(), on_epoch)


def episode_tasks(cfg: ExperimentConfig, world: WorldSpec) -> list:
    """The shared (start, goal, instruction) list every method is evaluated on."""
    s = cfg.evaluation.seed
    return [sample_task(world, cfg.rng(s, _TASK_STREAM, i)) for i in range(cfg.evaluation.n_episodes)]


# -- paired evaluation -----------------------------------------------------------

_STATE: dict = {}


def _init_worker(cfg, wm, world, methods):
    _STATE.update(cfg=cfg, wm=wm, world=world, methods=methods)


def _run_index(index: int) -> List[EpisodeRecord]:
    cfg, wm, world = _STATE["cfg"], _STATE["wm"], _STATE["world"]
    start, goal, instruction = sample_task(world, cfg.rng(cfg.evaluation.seed, _TASK_STREAM, index))
    ecfg = cfg.episode_config()
    out = []
    for m in _STATE["methods"]:
        rng = cfg.rng(cfg.evaluation.seed, _EPISODE_STREAM, index)
        out.append(run_episode(m, world, wm, start, goal, instruction, ecfg, rng, index))
    return out


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def evaluate(cfg: ExperimentConfig, wm: WorldModel, world: Optional[WorldSpec] = None,
             methods: Optional[Sequence[Method]] = None, workers: int = 1) -> List[EpisodeRecord]:
    """Run every method on the same task list; records come back ordered by episode then method."""
    world = world or build_world(cfg)
    methods = list(methods) if methods is not None else cfg.methods()
    indices = range(cfg.evaluation.n_episodes)
    if workers <= 1:
        _init_worker(cfg, wm, world, methods)
        chunks = [_run_index(i) for i in indices]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(cfg, wm, world, methods)) as ex:
            chunks = list(ex.map(_run_index, indices, chunksize=4))
    return [r for chunk in chunks for r in chunk]


def iteration0_win_rate(records: Sequence[EpisodeRecord], better=Method.WARM_START_MPPI,
                        worse=Method.UNINFORMED_MPPI) -> Tuple[int, int]:
    """Planning calls where ``better`` has the strictly lower first-iteration best cost.

    Calls are matched by episode index and replanning step.
    """
    a = {r.index: r for r in records if r.method is Method(better)}
    b = {r.index: r for r in records if r.method is Method(worse)}
    wins = total = 0
    for i in sorted(set(a) & set(b)):
        for ra, rb in zip(a[i].replans, b[i].replans):
            wins += ra["best_cost"][0] < rb["best_cost"][0]
            total += 1
    return wins, total


def instruction_fidelity(records: Sequence[EpisodeRecord]) -> Dict[str, Tuple[int, int]]:
    """Match counts per method, plus a "reference" row scored on the expert trajectories."""
    out: Dict[str, Tuple[int, int]] = {}
    seen = {}
    for r in records:
        hit, n = out.get(r.method.value, (0, 0))
        out[r.method.value] = (hit + int(instruction_match(r)), n + 1)
        seen.setdefault(r.index, r)
    ref = [instruction_match(dataclasses.replace(r, poses=r.gt_poses)) for r in seen.values()]
    out["reference"] = (int(sum(ref)), len(ref))
    return out


def comparison_pairs(methods: Sequence[Method]):
    """Later methods in the canonical order are tested as the better side."""
    order = [m for m in ALL_METHODS if m in set(methods)]
    return [(order[j], order[i]) for j in range(len(order)) for i in range(j)]


# -- timing -----------------------------------------------------------------------

def timing_sweep(wm: WorldModel, world: WorldSpec, iterations=(1, 2, 4, 8),
                 samples=(64, 128, 256, 512), repeats: int = 3, seed: int = 0,
                 base: Optional[PlannerConfig] = None) -> List[dict]:
    """Median wall-clock planning time per (J, N) on one fixed planning problem."""
    rng = np.random.default_rng([seed, _SWEEP_STREAM])
    start, goal, _ = sample_task(world, rng)
    z_t, z_g = wm.encode(observe(start, world)), wm.encode(observe(goal, world))
    base = base or PlannerConfig()
    rows = []
    for J in iterations:
        for N in samples:
            cfg = PlannerConfig(J, N, min(base.elites, N), base.temperature, base.sigma_min,
                                base.sigma_max, base.horizon, base.seed)
            init = uninformed_init(cfg.horizon, cfg.sigma_max)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                plan(z_t, z_g, init, cfg, wm, np.random.default_rng(cfg.seed))
                times.append((time.perf_counter() - t0) * 1e3)
            rows.append({"iterations": J, "samples": N, "work": J * N,
                         "plan_ms": float(np.median(times))})
    return rows


def linear_fit(x, y) -> Tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# -- files and manifest --------------------------------------------------------------

def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    platform_notes: dict = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)   # relative path -> sha256
    checkpoints: List[str] = field(default_factory=list)
    episodes: List[str] = field(default_factory=list)
    volatile: List[str] = field(default_factory=list)       # listed, never checksummed

    @classmethod
    def start(cls, out_dir: Path, cfg: ExperimentConfig) -> "RunManifest":
        """Reuse the manifest of an earlier command on the same config, else begin a new one."""
        path = Path(out_dir) / MANIFEST_NAME
        notes = {"python": platform.python_version(), "numpy": np.__version__,
                 "machine": platform.machine(), "system": platform.system()}
        if path.exists():
            d = json.loads(path.read_text())
            if d.get("config_hash") == cfg.hash():
                m = cls.from_dict(d)
                m.platform_notes = notes
                return m
        return cls(cfg.hash(), __version__, notes)

    def record(self, out_dir: Path, rel: str, volatile: bool = False):
        if volatile:
            if rel not in self.volatile:
                self.volatile.append(rel)
        else:
            self.artifacts[rel] = sha256_file(Path(out_dir) / rel)

    def to_dict(self) -> dict:
        return {"format_version": 1, "kind": "run_manifest", "config_hash": self.config_hash,
                "tool_version": self.tool_version, "platform": self.platform_notes,
                "artifacts": dict(sorted(self.artifacts.items())),
                "checkpoints": sorted(self.checkpoints), "episodes": sorted(self.episodes),
                "volatile": sorted(self.volatile)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["config_hash"], d.get("tool_version", ""), d.get("platform", {}),
                   dict(d.get("artifacts", {})), list(d.get("checkpoints", [])),
                   list(d.get("episodes", [])), list(d.get("volatile", [])))

    def write(self, out_dir: Path):
        (Path(out_dir) / MANIFEST_NAME).write_text(dumps_json(self.to_dict()))

    def verify(self, out_dir: Path) -> List[str]:
        """Artifacts that are missing or no longer match their checksum."""
        bad = []
        for rel, digest in self.artifacts.items():
            p = Path(out_dir) / rel
            if not p.exists() or sha256_file(p) != digest:
                bad.append(rel)
        return bad


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def loss_curve_csv(result: TrainingResult) -> str:
    val = result.val_loss or [float("nan")] * len(result.train_loss)
    rows = [[0, repr(result.initial_loss), ""]]
    rows += [[e + 1, repr(t), repr(v)] for e, (t, v) in enumerate(zip(result.train_loss, val))]
    return _csv(rows, ["epoch", "train_loss", "val_loss"])


def trajectory_csv(record: EpisodeRecord) -> str:
    rows = [[t, *map(repr, p), *map(repr, g)]
            for t, (p, g) in enumerate(zip(record.poses.tolist(), record.gt_poses.tolist()))]
    return _csv(rows, ["t", "x", "y", "heading", "gt_x", "gt_y", "gt_heading"])


def comparisons(table: MetricTable, methods: Sequence[Method],
                metrics=("ate_xy_final", "ate_xy_rmse", "rpe_xy_mean")):
    out = []
    for better, worse in comparison_pairs(methods):
        for metric in metrics:
            out.append(table.compare(better.value, worse.value, metric))
    return out


def report_text(cfg: ExperimentConfig, table: MetricTable, comps, records) -> str:
    lines = [
        f"episodes per method: {cfg.evaluation.n_episodes}; steps: {cfg.evaluation.max_steps}; "
        f"expert noise: {cfg.evaluation.noise_scale}",
        "reference trajectory: noise-free expert rollout from the same start, goal and instruction;",
        "goal observation rendered at its final pose.",
        "",
        table.to_text(),
        "paired sign tests (one-sided, better < worse):",
    ]
    for c in comps:
        lines.append(f"  {c.better} < {c.worse} on {c.metric}: wins {c.wins}/{c.n} "
                     f"({c.win_rate:.3f}), mean delta {c.mean_delta:.4f}, p = {c.p_value:.3g}")
    methods = {r.method for r in records}
    if {Method.WARM_START_MPPI, Method.UNINFORMED_MPPI} <= methods:
        wins, n = iteration0_win_rate(records)
        lines.append(f"first-iteration best cost lower with the policy prior: {wins}/{n} "
                     f"({wins / max(n, 1):.3f}) of matched planning calls")
    lines.append("instruction fidelity (sign of net executed turn vs instruction):")
    for m, (hit, n) in instruction_fidelity(records).items():
        lines.append(f"  {m}: {hit}/{n} ({hit / n:.3f})")
    return "\n".join(lines) + "\n"


def timing_summary(records: Sequence[EpisodeRecord]) -> dict:
    out = {}
    for r in records:
        d = out.setdefault(r.method.value, {"policy_ms": [], "planning_ms": []})
        d["policy_ms"].extend(r.policy_ms)
        d["planning_ms"].extend(r.plan_ms)
    return {m: {k: {"mean": float(np.mean(v)), "median": float(np.median(v)), "calls": len(v)}
                for k, v in d.items()} for m, d in out.items()}


def write_evaluation(out_dir: Path, cfg: ExperimentConfig, records: List[EpisodeRecord],
                     manifest: RunManifest) -> MetricTable:
    out_dir = Path(out_dir)
    (out_dir / "episodes").mkdir(parents=True, exist_ok=True)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    table = aggregate(records)
    methods = sorted({r.method for r in records}, key=list(ALL_METHODS).index)
    comps = comparisons(table, methods)

    def put(rel: str, text: str, volatile: bool = False):
        (out_dir / rel).write_text(text)
        manifest.record(out_dir, rel, volatile)

    for r in records:
        stem = f"{r.index:04d}_{r.method.value}"
        put(f"episodes/{stem}.json", dumps_json(r.to_dict(include_timings=False)))
        put(f"trajectories/{stem}.csv", trajectory_csv(r))
        if f"episodes/{stem}.json" not in manifest.episodes:
            manifest.episodes.append(f"episodes/{stem}.json")
    put("metrics.csv", table.to_csv())
    put("report.txt", report_text(cfg, table, comps, records))
    put("comparisons.csv", _csv([[c.better, c.worse, c.metric, c.n, c.wins, repr(c.mean_delta),
                                  repr(c.p_value)] for c in comps],
                                ["better", "worse", "metric", "n", "wins", "mean_delta", "p_value"]))
    fid = instruction_fidelity(records)
    put("instruction_fidelity.csv", _csv([[m, n, hit, repr(hit / n)] for m, (hit, n) in fid.items()],
                                         ["method", "episodes", "matches", "rate"]))
    put("timing.json", dumps_json(timing_summary(records)), volatile=True)
    return table
