"""Latent world model: frozen random-feature encoder and action-conditioned predictor.

The predictor is a small MLP whose every layer is scale/shift modulated by an
encoding of the actions in the context window. Gradients of the multi-step
rollout loss are computed by hand (reverse mode through the unrolled
predictor, truncated at a fixed number of steps).
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .actions import ACTION_DIM, ActionBounds, ActionChunk, Frame, FrameError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LN_EPS = 1e-5

Params = Dict[str, np.ndarray]


class NumericError(RuntimeError):
    """Training or planning produced a non-finite value."""


def layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass(frozen=True)
class EncoderSpec:
    obs_dim: int
    n_tokens: int = 4
    token_dim: int = 16
    seed: int = 0
    gain: float = 0.1

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.token_dim


class Encoder:
    """tanh random projection of the observation, layer-normalized per token."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        proj = rng.standard_normal((spec.obs_dim, spec.latent_dim))
        proj *= spec.gain / math.sqrt(spec.obs_dim)
        proj.setflags(write=False)
        self.projection = proj

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.spec.obs_dim:
            raise ValueError(f"observation has {obs.shape[-1]} features, encoder expects {self.spec.obs_dim}")
        h = np.tanh(obs @ self.projection)
        h = h.reshape(obs.shape[:-1] + (self.spec.n_tokens, self.spec.token_dim))
        return layer_norm(h)

    def checksum(self) -> str:
        return hashlib.sha256(self.projection.tobytes()).hexdigest()


@dataclass(frozen=True)
class PredictorSpec:
    n_tokens: int = 4
    token_dim: int = 16
    kind: str = "mlp"          # "mlp" or "linear"
    hidden: int = 128
    layers: int = 3
    action_embed: int = 16
    context: int = 3           # window w

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.token_dim

    def __post_init__(self):
        if self.kind not in ("mlp", "linear"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.context < 1 or self.layers < 1:
            raise ValueError("context and layers must be >= 1")


@dataclass
class RolloutConfig:
    horizon: int = 8
    context_window: int = 3
    k_roll: int = 4
    tbptt_window: int = 4
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    mean_over_k: bool = False
    grad_clip: float = 1.0
    val_fraction: float = 0.1

    def validate(self):
        if not 1 <= self.k_roll <= self.horizon:
            raise ValueError("need 1 <= k_roll <= horizon")
        if self.tbptt_window < 1:
            raise ValueError("tbptt_window must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("invalid optimizer settings")


# -- predictor -----------------------------------------------------------------

def init_params(spec: PredictorSpec, rng: np.random.Generator) -> Params:
    D, A = spec.latent_dim, ACTION_DIM
    if spec.kind == "linear":
        return {
            "Wz": np.eye(D) + 0.01 * rng.standard_normal((D, D)),
            "Wu": 0.01 * rng.standard_normal((A, D)),
            "b": np.zeros(D),
        }
    h, da = spec.hidden, spec.action_embed
    p: Params = {}
    for lag in range(spec.context):
        p[f"W_in{lag}"] = rng.standard_normal((D, h)) / math.sqrt(D) * (1.0 if lag == 0 else 0.3)
        p[f"A{lag}"] = rng.standard_normal((A, da)) / math.sqrt(A) * (1.0 if lag == 0 else 0.3)
    p["b_in"] = np.zeros(h)
    p["b_a"] = np.zeros(da)
    for layer in range(1, spec.layers + 1):
        if layer > 1:
            p[f"W{layer}"] = rng.standard_normal((h, h)) / math.sqrt(h)
            p[f"b{layer}"] = np.zeros(h)
        p[f"M{layer}"] = 0.5 * rng.standard_normal((da, 2 * h)) / math.sqrt(da)
        p[f"c{layer}"] = np.zeros(2 * h)
    p["W_out"] = 0.1 * rng.standard_normal((h, D)) / math.sqrt(h)
    p["b_out"] = np.zeros(D)
    return p


def _forward_step(ctx_z: Sequence[np.ndarray], ctx_a: Sequence[np.ndarray], p: Params,
                  spec: PredictorSpec):
    """One predictor application on flat latents. Context lists are most-recent first."""
    if spec.kind == "linear":
        y = ctx_z[0] @ p["Wz"] + ctx_a[0] @ p["Wu"] + p["b"]
        return y, (ctx_z, ctx_a)
    c = len(ctx_z)
    x = p["b_in"] + sum(ctx_z[lag] @ p[f"W_in{lag}"] for lag in range(c))
    e = np.tanh(p["b_a"] + sum(ctx_a[lag] @ p[f"A{lag}"] for lag in range(c)))
    h_prev = None
    layers = []
    hdim = spec.hidden
    for layer in range(1, spec.layers + 1):
        u = x if layer == 1 else h_prev @ p[f"W{layer}"] + p[f"b{layer}"]
        v = np.tanh(u)
        m = e @ p[f"M{layer}"] + p[f"c{layer}"]
        s, t = m[..., :hdim], m[..., hdim:]
        h = v * (1.0 + s) + t
        layers.append((h_prev, v, s))
        h_prev = h
    y = ctx_z[0] + h_prev @ p["W_out"] + p["b_out"]
    return y, (ctx_z, ctx_a, e, layers, h_prev)


def _backward_step(cache, dy: np.ndarray, p: Params, spec: PredictorSpec, grads: Params):
    """Accumulate parameter gradients into ``grads``; return gradients w.r.t. context latents."""
    if spec.kind == "linear":
        ctx_z, ctx_a = cache
        grads["Wz"] += ctx_z[0].T @ dy
        grads["Wu"] += ctx_a[0].T @ dy
        grads["b"] += dy.sum(axis=0)
        return [dy @ p["Wz"].T]
    ctx_z, ctx_a, e, layers, h_last = cache
    grads["W_out"] += h_last.T @ dy
    grads["b_out"] += dy.sum(axis=0)
    dh = dy @ p["W_out"].T
    de = np.zeros_like(e)
    dx = None
    for layer in range(spec.layers, 0, -1):
        h_prev, v, s = layers[layer - 1]
        dm = np.concatenate([dh * v, dh], axis=-1)
        grads[f"M{layer}"] += e.T @ dm
        grads[f"c{layer}"] += dm.sum(axis=0)
        de += dm @ p[f"M{layer}"].T
        du = dh * (1.0 + s) * (1.0 - v * v)
        if layer > 1:
            grads[f"W{layer}"] += h_prev.T @ du
            grads[f"b{layer}"] += du.sum(axis=0)
            dh = du @ p[f"W{layer}"].T
        else:
            dx = du
    de_pre = de * (1.0 - e * e)
    grads["b_a"] += de_pre.sum(axis=0)
    grads["b_in"] += dx.sum(axis=0)
    dctx = []
    for lag in range(len(ctx_z)):
        grads[f"A{lag}"] += ctx_a[lag].T @ de_pre
        grads[f"W_in{lag}"] += ctx_z[lag].T @ dx
        dctx.append(dx @ p[f"W_in{lag}"].T)
    dctx[0] = dctx[0] + dy
    return dctx


def _context(latents: List[np.ndarray], actions: np.ndarray, j: int, w: int):
    """Context for producing latent j+1 from latents[0..j] and actions[..., :j+1, :]."""
    c = min(j + 1, w)
    return ([latents[j - lag] for lag in range(c)],
            [actions[..., j - lag, :] for lag in range(c)])


def rollout_flat(z0: np.ndarray, actions: np.ndarray, p: Params, spec: PredictorSpec,
                 keep_cache: bool = False):
    """Autoregressive unroll on flat latents. z0: (B, D), actions: (B, H, 4) -> (B, H, D)."""
    latents = [z0]
    caches = []
    w = spec.context if spec.kind == "mlp" else 1
    for j in range(actions.shape[-2]):
        cz, ca = _context(latents, actions, j, w)
        y, cache = _forward_step(cz, ca, p, spec)
        latents.append(y)
        if keep_cache:
            caches.append(cache)
    out = np.stack(latents[1:], axis=-2)
    return (out, caches) if keep_cache else out


def rollout_loss_and_grad(p: Params, Z: np.ndarray, A: np.ndarray, spec: PredictorSpec,
                          k_roll: int, tbptt_window: int, mean_over_k: bool = False,
                          need_grad: bool = True, per_term: bool = False):
    """Multi-step rollout loss: sum over k of batch-mean squared latent error.

    Z: (B, >=K+1, D) encoded targets, A: (B, >=K, 4) normalized local actions.
    Gradient paths longer than ``tbptt_window`` predictor applications are cut.
    """
    if Z.shape[1] < k_roll + 1 or A.shape[1] < k_roll:
        raise ValueError(f"segments must have at least {k_roll + 1} observations")
    B = Z.shape[0]
    Z = Z[:, : k_roll + 1]
    A = A[:, :k_roll]
    pred, caches = rollout_flat(Z[:, 0], A, p, spec, keep_cache=True)
    diff = pred - Z[:, 1:]
    coef = 1.0 / k_roll if mean_over_k else 1.0
    loss = coef * float(np.sum(diff * diff)) / B
    if not need_grad:
        return loss, None
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dpred = [None] + [coef * 2.0 * diff[:, k - 1] / B for k in range(1, k_roll + 1)]

    def backprop(seeds: Dict[int, np.ndarray], last: int, first: int):
        gz = dict(seeds)
        for j in range(last, first - 1, -1):
            g = gz.pop(j, None)
            if g is None:
                continue
            dctx = _backward_step(caches[j - 1], g, p, spec, grads)
            for lag, d in enumerate(dctx):
                idx = j - 1 - lag
                if idx >= first:
                    gz[idx] = gz[idx] + d if idx in gz else d

    if tbptt_window >= k_roll and not per_term:
        backprop({k: dpred[k] for k in range(1, k_roll + 1)}, k_roll, 1)
    else:
        for k in range(1, k_roll + 1):
            backprop({k: dpred[k]}, k, max(1, k - tbptt_window + 1))
    return loss, grads


# -- world model bundle -----------------------------------------------------------

class WorldModel:
    """Frozen encoder, predictor parameters and the action bounds they were trained with."""

    def __init__(self, encoder: Encoder, spec: PredictorSpec, params: Params,
                 bounds: Optional[ActionBounds] = None,
                 rollout_config: Optional[RolloutConfig] = None):
        if spec.n_tokens != encoder.spec.n_tokens or spec.token_dim != encoder.spec.token_dim:
            raise ValueError("predictor latent shape does not match the encoder")
        self.encoder = encoder
        self.spec = spec
        self.params = params
        self.bounds = bounds
        self.rollout_config = rollout_config

    @property
    def latent_shape(self):
        return (self.spec.n_tokens, self.spec.token_dim)

    def encode(self, obs) -> np.ndarray:
        return self.encoder(obs)

    def predict_step(self, context_latents: Sequence[np.ndarray], context_actions: ActionChunk) -> np.ndarray:
        """Next latent from up to ``w`` latents (oldest first) and their actions."""
        if not isinstance(context_actions, ActionChunk):
            raise FrameError("context actions must be an ActionChunk")
        if context_actions.frame != Frame.LOCAL or not context_actions.normalized:
            raise FrameError("predictor consumes normalized local-frame actions")
        c = len(context_latents)
        if c == 0 or c > self.spec.context or len(context_actions) != c:
            raise ValueError(f"need 1..{self.spec.context} latents with one action each")
        D = self.spec.latent_dim
        cz = [np.asarray(z, dtype=float).reshape(1, D) for z in reversed(context_latents)]
        ca = [row.reshape(1, ACTION_DIM) for row in context_actions.values[::-1]]
        if self.spec.kind == "linear":
            cz, ca = cz[:1], ca[:1]
        y, _ = _forward_step(cz, ca, self.params, self.spec)
        return y.reshape(self.latent_shape)

    def rollout(self, z_t: np.ndarray, actions: ActionChunk) -> np.ndarray:
        """H predicted latents (H, n, d) for a normalized local chunk."""
        if actions.frame != Frame.LOCAL or not actions.normalized:
            raise FrameError("rollout consumes normalized local-frame actions")
        out = self.rollout_batch(np.asarray(z_t)[None], actions.values[None])
        return out[0]

    def rollout_batch(self, z_t: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """z_t: (n, d) or (B, n, d); actions: (B, H, 4) -> (B, H, n, d)."""
        D = self.spec.latent_dim
        actions = np.asarray(actions, dtype=float)
        B = actions.shape[0]
        z = np.asarray(z_t, dtype=float).reshape(-1, D)
        if z.shape[0] == 1 and B > 1:
            z = np.broadcast_to(z, (B, D))
        flat = rollout_flat(z, actions, self.params, self.spec)
        return flat.reshape(B, actions.shape[1], *self.latent_shape)

    def terminal_batch(self, z_t: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.rollout_batch(z_t, actions)[:, -1]

    def params_checksum(self) -> str:
        return params_checksum(self.params)

    # checkpoint container
    def to_checkpoint(self) -> dict:
        enc = self.encoder.spec
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "world_model",
            "encoder": asdict(enc),
            "predictor": {
                "spec": asdict(self.spec),
                "shapes": {k: list(v.shape) for k, v in self.params.items()},
            },
            "weights": {k: v.reshape(-1).tolist() for k, v in self.params.items()},
            "bounds": self.bounds.to_dict() if self.bounds is not None else None,
            "rollout_config": asdict(self.rollout_config) if self.rollout_config else None,
        }

    @classmethod
    def from_checkpoint(cls, d: dict) -> "WorldModel":
        if d.get("kind") != "world_model":
            raise ValueError("not a world model checkpoint")
        if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')}")
        encoder = Encoder(EncoderSpec(**d["encoder"]))
        spec = PredictorSpec(**d["predictor"]["spec"])
        expected = init_params(spec, np.random.default_rng(0))
        shapes = d["predictor"]["shapes"]
        params = {}
        for name, ref in expected.items():
            if name not in d["weights"] or tuple(shapes.get(name, ())) != ref.shape:
                raise ValueError(f"checkpoint weight {name!r} missing or has wrong shape")
            arr = np.array(d["weights"][name], dtype=float)
            if arr.size != ref.size:
                raise ValueError(f"checkpoint weight {name!r} has {arr.size} values, expected {ref.size}")
            params[name] = arr.reshape(ref.shape)
        extra = set(d["weights"]) - set(expected)
        if extra:
            raise ValueError(f"unexpected checkpoint weights {sorted(extra)}")
        bounds = ActionBounds.from_dict(d["bounds"]) if d.get("bounds") else None
        rc = RolloutConfig(**d["rollout_config"]) if d.get("rollout_config") else None
        return cls(encoder, spec, params, bounds, rc)


def params_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


# -- training ----------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: WorldModel
    initial_loss: float
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)


def make_segments(latents: Sequence[np.ndarray], actions: Sequence[np.ndarray], length: int):
    """Sliding windows of ``length`` actions (length+1 latents) from every episode."""
    zs, as_ = [], []
    for z, a in zip(latents, actions):
        for t in range(len(a) - length + 1):
            zs.append(z[t: t + length + 1])
            as_.append(a[t: t + length])
    if not zs:
        raise ValueError(f"no episode is long enough for segments of {length} steps")
    return np.stack(zs), np.stack(as_)


def split_episodes(n_episodes: int, val_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(n_episodes)
    n_val = int(round(val_fraction * n_episodes)) if n_episodes > 1 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 and n_episodes > 1 else 0), n_episodes - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sgd_fit(params: Params, spec: PredictorSpec, Z: np.ndarray, A: np.ndarray, cfg: RolloutConfig,
            rng: np.random.Generator, Zval=None, Aval=None, on_epoch: Optional[Callable] = None):
    """Plain minibatch SGD with global gradient-norm clipping. Mutates ``params``."""
    def full_loss(Zs, As):
        total = 0.0
        for i in range(0, len(Zs), 1024):
            lb, _ = rollout_loss_and_grad(params, Zs[i:i + 1024], As[i:i + 1024], spec, cfg.k_roll,
                                          cfg.tbptt_window, cfg.mean_over_k, need_grad=False)
            total += lb * len(Zs[i:i + 1024])
        return total / len(Zs)

    initial = full_loss(Z, A)
    train_curve, val_curve = [], []
    S = len(Z)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(S)
        acc, seen = 0.0, 0
        for i in range(0, S, cfg.batch_size):
            idx = perm[i: i + cfg.batch_size]
            loss, grads = rollout_loss_and_grad(params, Z[idx], A[idx], spec, cfg.k_roll,
                                                cfg.tbptt_window, cfg.mean_over_k)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite rollout loss at epoch {epoch + 1}; lower the learning rate "
                    f"(currently {cfg.learning_rate}) or the gradient clip ({cfg.grad_clip})")
            clip_grad_norm(grads, cfg.grad_clip)
            for name, g in grads.items():
                params[name] -= cfg.learning_rate * g
            acc += loss * len(idx)
            seen += len(idx)
        train_curve.append(acc / seen)
        if Zval is not None and len(Zval):
            val_curve.append(full_loss(Zval, Aval))
        if on_epoch is not None:
            on_epoch(epoch + 1, train_curve[-1], val_curve[-1] if val_curve else None)
    return initial, train_curve, val_curve


def train(dataset, cfg: RolloutConfig, rng: np.random.Generator,
          encoder_spec: Optional[EncoderSpec] = None,
          predictor_spec: Optional[PredictorSpec] = None,
          on_epoch: Optional[Callable] = None) -> TrainingResult:
    """Fit the predictor and action encoder on a simulator dataset; the encoder stays frozen."""
    cfg.validate()
    if not dataset.episodes:
        raise ValueError("empty dataset")
    encoder_spec = encoder_spec or EncoderSpec(obs_dim=dataset.world.obs_dim)
    if encoder_spec.obs_dim != dataset.world.obs_dim:
        raise ValueError("encoder observation size does not match the dataset world")
    encoder = Encoder(encoder_spec)
    spec = predictor_spec or PredictorSpec(encoder_spec.n_tokens, encoder_spec.token_dim,
                                           context=cfg.context_window)
    params = init_params(spec, rng)
    flat = [encoder(ep.observations).reshape(len(ep) + 1, -1) for ep in dataset.episodes]
    acts = [dataset.normalized_actions(i) for i in range(len(dataset.episodes))]
    tr, va = split_episodes(len(flat), cfg.val_fraction, cfg.seed)
    Z, A = make_segments([flat[i] for i in tr], [acts[i] for i in tr], cfg.k_roll)
    Zv = Av = None
    if len(va):
        Zv, Av = make_segments([flat[i] for i in va], [acts[i] for i in va], cfg.k_roll)
    initial, tcurve, vcurve = sgd_fit(params, spec, Z, A, cfg, rng, Zv, Av, on_epoch)
    model = WorldModel(encoder, spec, params, dataset.bounds, cfg)
    return TrainingResult(model, initial, tcurve, vcurve)


def encode_dataset(model: WorldModel, dataset):
    """Flat latents and normalized actions per episode."""
    flat = [model.encode(ep.observations).reshape(len(ep) + 1, -1) for ep in dataset.episodes]
    acts = [dataset.normalized_actions(i) for i in range(len(dataset.episodes))]
    return flat, acts


# -- gradient check ------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple


def gradient_check(params: Params, Z: np.ndarray, A: np.ndarray, spec: PredictorSpec,
                   cfg: RolloutConfig, n_weights: int = 120, eps: float = 1e-5,
                   rng: Optional[np.random.Generator] = None, grad_fn: Optional[Callable] = None,
                   floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central finite differences on sampled weights.

    Finite differences see the untruncated loss, so the analytic side is evaluated
    with a truncation window covering the whole rollout.
    """
    rng = rng or np.random.default_rng(0)
    window = max(cfg.tbptt_window, cfg.k_roll)

    def loss_at(pp):
        return rollout_loss_and_grad(pp, Z, A, spec, cfg.k_roll, window, cfg.mean_over_k,
                                     need_grad=False)[0]

    if grad_fn is None:
        _, grads = rollout_loss_and_grad(params, Z, A, spec, cfg.k_roll, window, cfg.mean_over_k)
    else:
        grads = grad_fn(params, Z, A, spec, cfg.k_roll, window, cfg.mean_over_k)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    # every array gets some samples, the rest proportional to size
    per = np.maximum(2, np.floor(n_weights * sizes / sizes.sum())).astype(int)
    per = np.minimum(per, sizes.astype(int))
    worst = (0.0, None, None, 0.0, 0.0)
    checked = 0
    pert = {k: v.copy() for k, v in params.items()}
    for name, count in zip(names, per):
        flat_idx = rng.choice(params[name].size, size=count, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, params[name].shape)
            orig = pert[name][idx]
            pert[name][idx] = orig + eps
            lp = loss_at(pert)
            pert[name][idx] = orig - eps
            lm = loss_at(pert)
            pert[name][idx] = orig
            numeric = (lp - lm) / (2 * eps)
            analytic = float(grads[name][idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, tuple(int(i) for i in idx), analytic, numeric)
    return GradCheckReport(worst[0], checked, worst)


def action_sensitivity(model: WorldModel, latents: np.ndarray, action: np.ndarray) -> float:
    """Mean ||P(z, a) - P(z, 0)|| over the given latents (single-frame context)."""
    B = latents.shape[0]
    z = latents.reshape(B, -1)
    a = np.broadcast_to(np.asarray(action, dtype=float), (B, ACTION_DIM))
    ya = rollout_flat(z, a[:, None, :], model.params, model.spec)[:, 0]
    y0 = rollout_flat(z, np.zeros((B, 1, ACTION_DIM)), model.params, model.spec)[:, 0]
    return float(np.mean(np.linalg.norm(ya - y0, axis=-1)))
