"""GRU sequential recommender conditioned on a sampled latent intent.

The final GRU state over recent items, the intent sample ``z`` (held
constant by a stop-gradient) and the request context are concatenated and
passed through the post-fusion MLP. Item scores are dot products between
that user representation and per-item output embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import latent_intent as li
from .numerics import (
    AdamState,
    NonFiniteError,
    ParameterSet,
    ShapeError,
    Tensor,
    adam_step,
    gru_step,
    init_gru,
    init_mlp,
    mlp_forward,
    stop_gradient,
    zero_grads,
)
from .numerics import tensor as T
from .simulator import InteractionEvent, N_DEVICES, N_TIME_BUCKETS, Trajectory, trajectory_features

LOSS_MODES = ("ce", "reinforce")
VARIANTS = ("control", "experiment")


@dataclass(frozen=True)
class RecommenderDims:
    catalog_size: int = 500
    d_emb: int = 16
    d_hidden: int = 32
    d_z: int = 4
    d_context: int = N_TIME_BUCKETS + N_DEVICES
    post_fusion_hidden: tuple[int, ...] = (32,)
    d_user: int = 16

    def post_fusion_sizes(self) -> list[int]:
        return [self.d_hidden + self.d_z + self.d_context, *self.post_fusion_hidden, self.d_user]


@dataclass
class RecommenderParams:
    item_embeddings: ParameterSet
    gru: ParameterSet
    post_fusion: ParameterSet
    policy_embeddings: ParameterSet
    dims: RecommenderDims

    @property
    def param_sets(self) -> list[ParameterSet]:
        return [self.item_embeddings, self.gru, self.post_fusion, self.policy_embeddings]


@dataclass
class PolicyDistribution:
    logits: Tensor
    log_probs: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


def init_recommender(dims: RecommenderDims | None = None, seed: int = 0) -> RecommenderParams:
    dims = dims or RecommenderDims()
    rng = np.random.default_rng(seed)
    items = ParameterSet("items")
    items.add("E", rng.normal(0.0, 0.1, size=(dims.catalog_size, dims.d_emb)))
    policy = ParameterSet("policy")
    policy.add("E", rng.normal(0.0, 0.1, size=(dims.catalog_size, dims.d_user)))
    return RecommenderParams(
        item_embeddings=items,
        gru=init_gru("gru", dims.d_emb, dims.d_hidden, rng),
        post_fusion=init_mlp("post_fusion", dims.post_fusion_sizes(), rng),
        policy_embeddings=policy,
        dims=dims,
    )


def _as_history_matrix(events) -> np.ndarray:
    ids = [e.item_id if isinstance(e, InteractionEvent) else int(e) for e in events]
    return np.asarray(ids, dtype=np.int64).reshape(1, -1)


def encode_history_batch(params: RecommenderParams, history: np.ndarray) -> Tensor:
    """Final GRU state per row of ``history`` (B, H); ``-1`` marks left padding."""
    history = np.asarray(history, dtype=np.int64)
    n = params.dims.catalog_size
    if history.size and history.max() >= n:
        raise IndexError(f"item id {history.max()} outside catalog of size {n}")
    batch = history.shape[0]
    h = Tensor(np.zeros((batch, params.dims.d_hidden)))
    table = params.item_embeddings["E"]
    for j in range(history.shape[1]):
        ids = history[:, j]
        mask = ids >= 0
        if not mask.any():
            continue
        x_t = T.take_rows(table, np.where(mask, ids, 0))
        h_new = gru_step(params.gru, h, x_t)
        h = h_new if mask.all() else T.where(mask[:, None], h_new, h)
    return h


def encode_history(params: RecommenderParams, events: Sequence) -> Tensor:
    """Final hidden state for one user's events; empty history gives zeros."""
    if len(events) == 0:
        return Tensor(np.zeros(params.dims.d_hidden))
    ids = _as_history_matrix(events)
    if ids.min() < 0:
        raise IndexError("negative item id")
    return encode_history_batch(params, ids)[0]


def fuse(params: RecommenderParams, hidden, z, context) -> Tensor:
    """Post-fusion MLP over concat(hidden, stop_gradient(z), context)."""
    if isinstance(z, li.LatentSample):
        z = z.z
    z = stop_gradient(T.as_tensor(z))
    hidden, context = T.as_tensor(hidden), T.as_tensor(context)
    joined = T.concat([hidden, z, context], axis=-1)
    sizes = params.dims.post_fusion_sizes()
    if joined.shape[-1] != sizes[0]:
        raise ShapeError(f"fused input has dim {joined.shape[-1]}, expected {sizes[0]}")
    return mlp_forward(params.post_fusion, joined, sizes, activation="relu")


def policy(params: RecommenderParams, user_repr) -> PolicyDistribution:
    user_repr = T.as_tensor(user_repr)
    emb = params.policy_embeddings["E"]
    if user_repr.shape[-1] != emb.shape[1]:
        raise ShapeError(f"user_repr dim {user_repr.shape[-1]} != item embedding dim {emb.shape[1]}")
    return policy_from_logits(T.matmul(user_repr, T.transpose(emb)))


def policy_from_logits(logits) -> PolicyDistribution:
    logits = T.as_tensor(logits)
    return PolicyDistribution(logits=logits, log_probs=T.log_softmax(logits, axis=-1))


def _pick(log_probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n = log_probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"label outside [0, {n})")
    if log_probs.ndim == 1:
        return log_probs[int(labels)]
    return log_probs[np.arange(len(labels)), labels]


def rec_loss_ce(dist: PolicyDistribution, label) -> Tensor:
    """Next-item cross-entropy, -log p(label); per example for batches."""
    return -_pick(dist.log_probs, label)


def rec_loss_reinforce(dist: PolicyDistribution, action, reward, baseline) -> Tensor:
    """Score-function surrogate -(reward - baseline) * log p(action)."""
    advantage = np.asarray(reward, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    return _pick(dist.log_probs, action) * (-advantage)


def total_loss(rec, elbo, lam: float):
    """rec - lam * elbo; lam = 0 is the no-intent control."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return rec
    return rec - elbo * lam


# ---------------------------------------------------------------------------
# examples, batches and the joint training step
# ---------------------------------------------------------------------------

@dataclass
class Examples:
    """Flat per-step training examples built from trajectories."""

    user: np.ndarray
    step: np.ndarray
    history: np.ndarray
    x: np.ndarray
    y: np.ndarray
    context: np.ndarray
    label: np.ndarray
    regime: np.ndarray
    s_past: np.ndarray
    s_future: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def take(self, idx) -> "Examples":
        return Examples(**{k: v[idx] for k, v in vars(self).items()})


def build_examples(trajectories: Sequence[Trajectory], history_len: int) -> Examples:
    parts: dict[str, list] = {k: [] for k in Examples.__dataclass_fields__}
    for traj in trajectories:
        n = len(traj)
        feats = trajectory_features(traj)
        padded = np.concatenate([np.full(history_len, -1, dtype=np.int64), traj.items])
        windows = np.lib.stride_tricks.sliding_window_view(padded, history_len)[:n]
        parts["user"].append(np.full(n, traj.user_id))
        parts["step"].append(np.arange(n))
        parts["history"].append(windows)
        parts["x"].append(feats["x"])
        parts["y"].append(feats["y"])
        parts["context"].append(feats["x"][:, -(N_TIME_BUCKETS + N_DEVICES):])
        parts["label"].append(traj.items)
        parts["regime"].append(traj.regimes)
        parts["s_past"].append(feats["s_past"])
        parts["s_future"].append(feats["s_future"])
    return Examples(**{k: np.concatenate(v) for k, v in parts.items()})


@dataclass(frozen=True)
class TrainConfig:
    lambda_elbo: float = 0.1
    learning_rate: float = 1e-3
    loss_mode: str = "ce"
    variant: str = "experiment"
    use_prior_mean: bool = False
    baseline_decay: float = 0.9

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.lambda_elbo < 0:
            raise ValueError("lambda_elbo must be non-negative")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.variant == "control" else self.lambda_elbo


@dataclass
class StepNoise:
    prior: np.ndarray
    posterior: np.ndarray
    action: np.ndarray

    @classmethod
    def draw(cls, seed: int, step: int, batch: int, d_z: int) -> "StepNoise":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 7]))
        return cls(
            prior=rng.standard_normal((batch, d_z)),
            posterior=rng.standard_normal((batch, d_z)),
            action=rng.random(batch),
        )


@dataclass
class TrainingState:
    """Everything that a checkpoint must capture."""

    intent: li.IntentModuleParams
    rec: RecommenderParams
    adam: dict[str, AdamState] = field(default_factory=dict)
    baseline: float = 0.0
    step: int = 0

    @property
    def param_sets(self) -> list[ParameterSet]:
        return self.intent.param_sets + self.rec.param_sets

    def ensure_optimizers(self, lr: float) -> None:
        for ps in self.param_sets:
            if ps.name not in self.adam:
                self.adam[ps.name] = AdamState.for_params(ps, lr=lr)


class StepMetrics(NamedTuple):
    """Loss terms of one update; ``step`` counts updates applied before it."""

    step: int
    total_loss: float
    rec_loss: float
    recon: float
    kl: float
    grad_norm: float
    logvar_min: float
    logvar_max: float


class Forward(NamedTuple):
    total: Tensor
    rec: Tensor
    terms: li.ElboTerms
    dist: PolicyDistribution
    z: li.LatentSample | None
    reward: np.ndarray | None
    actions: np.ndarray | None = None


def intent_input(state: TrainingState, batch: Examples, noise: StepNoise, config: TrainConfig):
    """Intent sample fed to the recommender; zeros for the control model."""
    if config.variant == "control":
        return None, Tensor(np.zeros((len(batch), state.rec.dims.d_z)))
    sample = li.sample_prior(state.intent, batch.x, noise.prior, use_mean=config.use_prior_mean)
    return sample, sample.z


def sample_actions(probabilities: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probabilities, axis=-1)
    actions = (cdf < uniforms[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(actions, probabilities.shape[-1] - 1)


def forward(
    state: TrainingState,
    batch: Examples,
    noise: StepNoise,
    config: TrainConfig,
    reward_fn=None,
    frozen_z: np.ndarray | None = None,
    frozen_actions: np.ndarray | None = None,
) -> Forward:
    """Joint loss for one batch.

    ``frozen_z`` and ``frozen_actions`` replace the sampled intent and
    REINFORCE actions by constants. The loss then becomes the plain
    function whose gradient backprop computes (z enters through a
    stop-gradient and actions are discrete), which finite differences need.
    """
    terms = li.elbo(state.intent, batch.x, batch.y, noise.posterior)
    if frozen_z is None:
        sample, z = intent_input(state, batch, noise, config)
    else:
        sample, z = None, Tensor(np.asarray(frozen_z, dtype=np.float64))
    hidden = encode_history_batch(state.rec, batch.history)
    user = fuse(state.rec, hidden, z, batch.context)
    dist = policy(state.rec, user)
    reward = actions = None
    if config.loss_mode == "ce":
        rec = T.tmean(rec_loss_ce(dist, batch.label))
    else:
        if reward_fn is None:
            raise ValueError("REINFORCE mode needs a reward function")
        if frozen_actions is None:
            actions = sample_actions(dist.probabilities, noise.action)
        else:
            actions = np.asarray(frozen_actions, dtype=np.int64)
        reward = np.asarray(reward_fn(batch, actions), dtype=np.float64)
        rec = T.tmean(rec_loss_reinforce(dist, actions, reward, state.baseline))
    total = total_loss(rec, T.tmean(terms.elbo), config.effective_lambda)
    return Forward(total=total, rec=rec, terms=terms, dist=dist, z=sample, reward=reward, actions=actions)


def _forward_backward(state, batch, noise, config, reward_fn) -> tuple[Forward, StepMetrics]:
    sets = state.param_sets
    zero_grads(*sets)
    out = forward(state, batch, noise, config, reward_fn)
    step = state.step
    values = {
        "total_loss": out.total.item(),
        "rec_loss": out.rec.item(),
        "recon": float(out.terms.recon.data.mean()),
        "kl": float(out.terms.kl.data.mean()),
    }
    for name, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteError(f"step {step}: {name} is not finite ({v})")
    try:
        out.total.backward()
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {step}: backward pass failed: {exc}") from exc
    sq = sum(float(np.sum(g * g)) for ps in sets for g in ps.grads.values())
    lv = li.log_variances([out.terms.posterior, out.terms.prior])
    metrics = StepMetrics(
        step=step,
        grad_norm=math.sqrt(sq),
        logvar_min=float(lv.min()),
        logvar_max=float(lv.max()),
        **values,
    )
    return out, metrics


def evaluate_step(
    state: TrainingState,
    batch: Examples,
    noise: StepNoise,
    config: TrainConfig,
    reward_fn=None,
) -> StepMetrics:
    """Metrics (and gradients) of the next update without applying it."""
    return _forward_backward(state, batch, noise, config, reward_fn)[1]


def train_step(
    state: TrainingState,
    batch: Examples,
    noise: StepNoise,
    config: TrainConfig,
    reward_fn=None,
) -> StepMetrics:
    """One joint update of recommender and intent module; raises on non-finite values."""
    state.ensure_optimizers(config.learning_rate)
    out, metrics = _forward_backward(state, batch, noise, config, reward_fn)
    for ps in state.param_sets:
        try:
            adam_step(ps, state.adam[ps.name])
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {metrics.step}: {exc}") from exc
    if out.reward is not None:
        d = config.baseline_decay
        state.baseline = d * state.baseline + (1.0 - d) * float(out.reward.mean())
    state.step += 1
    return metrics


def topic_reward(item_topics: np.ndarray, preferred_topic: np.ndarray):
    """Reward 1 when the recommended item's topic is the current regime's favorite."""

    def reward(batch: Examples, actions: np.ndarray) -> np.ndarray:
        return (item_topics[actions] == preferred_topic[batch.regime]).astype(np.float64)

    return reward


def next_item_log_likelihood(
    state: TrainingState,
    examples: Examples,
    config: TrainConfig,
    seed: int = 0,
    chunk: int = 2048,
) -> np.ndarray:
    """log p(label) per example under the current policy (no parameter updates)."""
    out = np.empty(len(examples))
    for start in range(0, len(examples), chunk):
        idx = np.arange(start, min(start + chunk, len(examples)))
        batch = examples.take(idx)
        noise = StepNoise.draw(seed, start, len(idx), state.rec.dims.d_z)
        _, z = intent_input(state, batch, noise, config)
        hidden = encode_history_batch(state.rec, batch.history)
        dist = policy(state.rec, fuse(state.rec, hidden, z, batch.context))
        out[idx] = _pick(dist.log_probs, batch.label).data
    return out
