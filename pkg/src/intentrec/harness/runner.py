"""Glue between configs, datasets, training, analysis and gradient checks."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import analysis as an
from .. import latent_intent as li
from .. import recommender as rec
from .. import simulator as sim
from ..numerics import NonFiniteError, grad_check_report
from ..numerics.gradcheck import min_relu_input
from ..numerics.layers import glorot_init
from .checkpoint import checkpoint_name, list_checkpoints, load_checkpoint, save_checkpoint
from .config import RunConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "total_loss",
    "rec_loss",
    "recon",
    "kl",
    "grad_norm",
    "logvar_min",
    "logvar_max",
)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.reason = reason


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def sim_config(cfg: RunConfig) -> sim.SimConfig:
    s = cfg.sim
    return sim.SimConfig(
        n_intents=s.n_intents,
        n_topics=s.n_topics,
        catalog_size=s.catalog_size,
        traj_len=s.traj_len,
        window=s.window,
        switch_prob=s.switch_prob,
        repeat_prob=s.repeat_prob,
        device_change_prob=s.device_change_prob,
        seed=cfg.run.seed,
    )


def intent_dims(cfg: RunConfig) -> li.IntentDims:
    return li.IntentDims(d_x=sim.D_X, d_y=sim.D_Y, d_z=cfg.intent.d_z, hidden=cfg.intent.hidden)


def recommender_dims(cfg: RunConfig) -> rec.RecommenderDims:
    r = cfg.recommender
    return rec.RecommenderDims(
        catalog_size=cfg.sim.catalog_size,
        d_emb=r.d_emb,
        d_hidden=r.d_hidden,
        d_z=cfg.intent.d_z,
        post_fusion_hidden=r.post_fusion_hidden,
        d_user=r.d_user,
    )


def train_config(cfg: RunConfig) -> rec.TrainConfig:
    r = cfg.recommender
    return rec.TrainConfig(
        lambda_elbo=r.lambda_elbo,
        learning_rate=cfg.train.learning_rate,
        loss_mode=r.loss_mode,
        variant=cfg.run.variant,
        use_prior_mean=r.use_prior_mean,
        baseline_decay=r.baseline_decay,
    )


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint32)[0])


def build_state(cfg: RunConfig) -> rec.TrainingState:
    """Freshly initialised model and optimizer state for ``cfg``."""
    clip = li.ClipBounds(cfg.intent.clip_a, cfg.intent.clip_b) if cfg.intent.clip else None
    intent = li.init_params(
        intent_dims(cfg),
        init_epsilon=cfg.intent.init_epsilon,
        seed=_sub_seed(cfg.run.seed, 1),
        clip=clip,
        decoder_init=cfg.intent.decoder_init,
    )
    model = rec.init_recommender(recommender_dims(cfg), seed=_sub_seed(cfg.run.seed, 2))
    state = rec.TrainingState(intent=intent, rec=model)
    state.ensure_optimizers(cfg.train.learning_rate)
    return state


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def generate(cfg: RunConfig, out_dir) -> list[sim.Trajectory]:
    return sim.generate_dataset(sim_config(cfg), cfg.sim.n_users, seed=cfg.run.seed, out_dir=out_dir)


@dataclass
class SplitData:
    trajectories: list[sim.Trajectory]
    train_users: list[sim.Trajectory]
    heldout_users: list[sim.Trajectory]
    train: rec.Examples
    heldout: rec.Examples


def load_split(cfg: RunConfig, data_dir) -> SplitData:
    """The last ``heldout_fraction`` of user ids are held out."""
    trajs = sim.load_dataset(data_dir, window=cfg.sim.window)
    if len(trajs) < 2:
        raise ValueError("dataset needs at least two users")
    n_held = max(1, int(round(cfg.train.heldout_fraction * len(trajs))))
    n_held = min(n_held, len(trajs) - 1)
    train_users, held = trajs[:-n_held], trajs[-n_held:]
    h = cfg.recommender.history_len
    return SplitData(
        trajectories=trajs,
        train_users=train_users,
        heldout_users=held,
        train=rec.build_examples(train_users, h),
        heldout=rec.build_examples(held, h),
    )


def reward_function(cfg: RunConfig):
    sc = sim_config(cfg)
    preferred = np.array([r.preferred_topic for r in sc.regimes])
    return rec.topic_reward(sc.item_topics, preferred)


def batch_indices(seed: int, step: int, n_examples: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 3]))
    return rng.integers(n_examples, size=batch_size)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _metric_row(m: rec.StepMetrics) -> list[str]:
    return [str(m.step)] + [repr(float(v)) for v in m[1:]]


def _truncate_metrics(path: Path, upto_step: int) -> None:
    """Keep the header and rows with step < ``upto_step``."""
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < upto_step]
    path.write_text("".join(kept))


def train(
    cfg: RunConfig,
    data_dir,
    out_dir,
    resume=None,
    data: SplitData | None = None,
) -> rec.TrainingState:
    """Run ``cfg.train.steps`` updates, writing metrics.csv and checkpoints to ``out_dir``.

    With ``resume`` the state is restored from that checkpoint, metrics rows
    at or after its step are dropped, and training continues from there.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_split(cfg, data_dir)
    tc = train_config(cfg)
    reward_fn = reward_function(cfg) if tc.loss_mode == "reinforce" else None
    seed, bsz, d_z = cfg.run.seed, cfg.train.batch_size, cfg.intent.d_z
    metrics_path = out / "metrics.csv"

    if resume is not None:
        saved_cfg, state = load_checkpoint(resume)
        # the step budget may grow between runs; everything else must match
        if saved_cfg.replace(train={"steps": cfg.train.steps}) != cfg:
            raise ValueError("resume checkpoint was written with a different config")
        if metrics_path.exists():
            _truncate_metrics(metrics_path, state.step)
    else:
        state = build_state(cfg)
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
        save_checkpoint(out / checkpoint_name(0), cfg, state)

    def batch_for(step):
        idx = batch_indices(seed, step, len(data.train), bsz)
        return data.train.take(idx), rec.StepNoise.draw(seed, step, bsz, d_z)

    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if cfg.train.steps == 0 and state.step == 0:
            batch, noise = batch_for(0)
            writer.writerow(_metric_row(rec.evaluate_step(state, batch, noise, tc, reward_fn)))
        while state.step < cfg.train.steps:
            step = state.step
            batch, noise = batch_for(step)
            try:
                m = rec.train_step(state, batch, noise, tc, reward_fn)
            except NonFiniteError as exc:
                fh.flush()
                raise TrainingAborted(step, str(exc)) from exc
            writer.writerow(_metric_row(m))
            if state.step % cfg.train.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / checkpoint_name(state.step), cfg, state)
                logger.info("step %d: total %.4f kl %.4f", m.step, m.total_loss, m.kl)
    save_checkpoint(out / checkpoint_name(state.step), cfg, state)
    summary = {
        "variant": cfg.run.variant,
        "seed": cfg.run.seed,
        "training_step": state.step,
        "heldout_examples": len(data.heldout),
        "heldout_next_item_ll": heldout_log_likelihood(cfg, state, data),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return state


def heldout_log_likelihood(cfg: RunConfig, state: rec.TrainingState, data: SplitData) -> float:
    ll = rec.next_item_log_likelihood(state, data.heldout, train_config(cfg), seed=_sub_seed(cfg.run.seed, 5))
    return float(ll.mean())


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

@dataclass
class AnalysisOutputs:
    surprise: list[dict]
    probe: list[dict]
    metadata: dict


def analyze(checkpoint_dir, data_dir, out_dir) -> AnalysisOutputs:
    """Write surprise.csv, probe.csv and analysis.json for every checkpoint."""
    paths = list_checkpoints(checkpoint_dir)
    if not paths:
        raise FileNotFoundError(f"no checkpoints found in {checkpoint_dir}")
    loaded = [load_checkpoint(p) for p in paths]
    cfg = loaded[-1][0]
    data = load_split(cfg, data_dir)
    a = cfg.analysis

    topics = an.build_topic_clusters(
        [t.items for t in data.train_users],
        k=a.n_clusters,
        embedding_dim=a.factor_rank,
        seed=cfg.run.seed,
        n_items=cfg.sim.catalog_size,
        als_sweeps=a.als_sweeps,
        kmeans_iters=a.kmeans_iters,
    )
    item_new, topic_new = [], []
    for traj in data.heldout_users:
        i_new, t_new = an.novelty_flags(traj.items, topics)
        item_new.append(i_new)
        topic_new.append(t_new)
    ev = data.heldout
    cohorts = an.cohort_masks(np.concatenate(item_new), np.concatenate(topic_new), ev.s_past, ev.s_future)

    checkpoints = sorted(((s.step, s.intent) for _, s in loaded), key=lambda p: p[0])
    surprise = an.surprise_report(checkpoints, ev.x, ev.y, cohorts)

    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 11]))
    prior_noise = noise_rng.standard_normal((len(ev), cfg.intent.d_z))
    null_z = noise_rng.standard_normal((len(ev), cfg.intent.d_z))
    probe = []
    for step, params in checkpoints:
        z = li.sample_prior(params, ev.x, prior_noise).z.data
        for name, rep in (("prior_z", z), ("noise", null_z)):
            res = an.intent_probe(rep, ev.regime, ev.user, a.probe_test_fraction, seed=cfg.run.seed)
            probe.append(
                {
                    "training_step": step,
                    "representation": name,
                    "accuracy": res.accuracy,
                    "baseline": res.baseline,
                    "stderr": res.stderr,
                    "n_train": res.n_train,
                    "n_test": res.n_test,
                }
            )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    an.write_csv(out / "surprise.csv", an.SURPRISE_COLUMNS, surprise)
    an.write_csv(out / "probe.csv", an.PROBE_COLUMNS, probe)
    metadata = {
        "kl_examples": "heldout",
        "heldout_users": [t.user_id for t in data.heldout_users],
        "checkpoints": [p.name for p in paths],
        "n_clusters": a.n_clusters,
    }
    (out / "analysis.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return AnalysisOutputs(surprise=surprise, probe=probe, metadata=metadata)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradcheckProblem:
    """A frozen loss at a generic parameter point."""

    state: rec.TrainingState
    loss: object
    kink_distance: float
    attempts: int


def _randomize(state: rec.TrainingState, rng: np.random.Generator) -> None:
    """Glorot weights and small non-zero biases everywhere but the embeddings.

    At the near-zero training init most intent-module gradients are ~1e-9
    and the central-difference comparison would only measure round-off.
    """
    for ps in state.intent.param_sets + [state.rec.post_fusion, state.rec.gru]:
        for _, t in ps.items():
            if t.ndim == 2:
                t.data = glorot_init(rng, t.shape)
            else:
                t.data = rng.uniform(-0.1, 0.1, size=t.shape)


def gradcheck_problem(cfg: RunConfig, max_attempts: int = 1000) -> GradcheckProblem:
    """Build the joint loss with noise, intent sample and actions held fixed.

    Parameter points are drawn until no ReLU input lies within
    ``gradcheck.kink_margin`` of zero.
    """
    g = cfg.gradcheck
    check_cfg = cfg.replace(
        sim={"catalog_size": g.catalog_size},
        recommender={"history_len": g.history_len},
    )
    traj_cfg = check_cfg.replace(sim={"traj_len": max(2 * (g.batch_size + g.history_len), 10)})
    trajs = sim.generate_dataset(sim_config(traj_cfg), 2, seed=cfg.run.seed)
    examples = rec.build_examples(trajs, g.history_len)
    # rows late enough in the trajectory to have a full history
    batch = examples.take(np.arange(g.history_len, g.history_len + g.batch_size))
    tc = train_config(check_cfg)
    noise = rec.StepNoise.draw(cfg.run.seed, 0, g.batch_size, cfg.intent.d_z)
    reward_fn = reward_function(check_cfg) if tc.loss_mode == "reinforce" else None

    for attempt in range(1, max_attempts + 1):
        state = build_state(check_cfg)
        _randomize(state, np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 9, attempt])))
        state.baseline = 0.5 if reward_fn is not None else 0.0
        first = rec.forward(state, batch, noise, tc, reward_fn)
        z = first.z.z.data if first.z is not None else np.zeros((g.batch_size, cfg.intent.d_z))

        def loss(state=state, z=z, actions=first.actions):
            return rec.forward(state, batch, noise, tc, reward_fn, frozen_z=z, frozen_actions=actions).total

        kink = min_relu_input(loss)
        if kink > g.kink_margin:
            return GradcheckProblem(state=state, loss=loss, kink_distance=kink, attempts=attempt)
    raise RuntimeError(f"no parameter point with ReLU inputs above {g.kink_margin} in {max_attempts} draws")


def gradcheck(cfg: RunConfig, corrupt: float = 0.0) -> dict[str, float]:
    """Worst relative error per parameter tensor for the joint loss with frozen noise."""
    problem = gradcheck_problem(cfg)
    g = cfg.gradcheck
    return grad_check_report(problem.loss, problem.state.param_sets, step=g.fd_step, corrupt=corrupt, order=g.order)
