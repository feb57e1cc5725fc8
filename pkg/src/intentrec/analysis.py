"""Latent-space analysis: posterior-prior KL as a surprise signal.

Examples are split into cohorts (new vs. previously consumed item, new vs.
seen topic cluster, changed vs. unchanged search behavior) and the mean
KL(q(z|x,y) || p(z|x)) per cohort is tracked across checkpoints. A
logistic probe checks whether prior samples of z identify the simulator's
ground-truth regime.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import latent_intent as li

SURPRISE_COLUMNS = ("training_step", "cohort", "mean_kl", "count", "stderr")
PROBE_COLUMNS = (
    "training_step",
    "representation",
    "accuracy",
    "baseline",
    "stderr",
    "n_train",
    "n_test",
)
COHORTS = (
    "new_item",
    "old_item",
    "new_topic",
    "old_topic",
    "search_changed",
    "search_unchanged",
)


class SearchChange(str, Enum):
    CHANGED = "changed"
    UNCHANGED = "unchanged"


class Novelty(str, Enum):
    NEW_ITEM = "new_item"
    NEW_TOPIC_ONLY = "new_topic_only"
    OLD = "old"


@dataclass(frozen=True)
class NoveltyLabel:
    item_new: bool
    topic_new: bool

    @property
    def label(self) -> Novelty:
        if self.item_new:
            return Novelty.NEW_ITEM
        if self.topic_new:
            return Novelty.NEW_TOPIC_ONLY
        return Novelty.OLD


@dataclass
class TopicModel:
    embeddings: np.ndarray
    assignment: np.ndarray
    k: int

    def cluster_of(self, item: int) -> int:
        if not 0 <= item < len(self.assignment):
            raise KeyError(f"item {item} is not in the topic model")
        return int(self.assignment[item])


@dataclass(frozen=True)
class SurpriseRecord:
    user_id: int
    step: int
    kl: float
    novelty: Novelty
    search: SearchChange
    training_step: int


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    baseline: float
    stderr: float
    n_train: int
    n_test: int

    @property
    def lift(self) -> float:
        return self.accuracy - self.baseline


# ---------------------------------------------------------------------------
# KL and labels
# ---------------------------------------------------------------------------

def posterior_prior_kl(params: li.IntentModuleParams, x, y) -> np.ndarray:
    """KL(q(z|x,y) || p(z|x)) per example."""
    q = li.encode(params, x, y)
    p = li.prior(params, x)
    return np.asarray(li.kl_diag_gaussian(q, p).data)


def label_search_change(s_past: int, s_future: int) -> SearchChange:
    if s_past < 0 or s_future < 0:
        raise ValueError("search counts must be non-negative")
    changed = (s_past > 0) != (s_future > 0)
    return SearchChange.CHANGED if changed else SearchChange.UNCHANGED


def search_changed(s_past: np.ndarray, s_future: np.ndarray) -> np.ndarray:
    return (np.asarray(s_past) > 0) != (np.asarray(s_future) > 0)


def label_novelty(items: Sequence[int], t: int, topics: TopicModel) -> NoveltyLabel:
    """Is ``items[t]`` new to this user, at item level and at cluster level?"""
    if not 0 <= t < len(items):
        raise IndexError(f"step {t} outside history of length {len(items)}")
    item = int(items[t])
    cluster = topics.cluster_of(item)
    before = [int(i) for i in items[:t]]
    return NoveltyLabel(
        item_new=item not in before,
        topic_new=cluster not in {topics.cluster_of(i) for i in before},
    )


def novelty_flags(items: np.ndarray, topics: TopicModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`label_novelty` over a whole trajectory."""
    items = np.asarray(items)
    if items.size and items.max() >= len(topics.assignment):
        raise KeyError(f"item {items.max()} is not in the topic model")
    clusters = topics.assignment[items]
    _, first_item = np.unique(items, return_index=True)
    _, first_cluster = np.unique(clusters, return_index=True)
    item_new = np.zeros(len(items), dtype=bool)
    topic_new = np.zeros(len(items), dtype=bool)
    item_new[first_item] = True
    topic_new[first_cluster] = True
    return item_new, topic_new


# ---------------------------------------------------------------------------
# topic clusters from co-occurrence
# ---------------------------------------------------------------------------

def cooccurrence_matrix(interactions: Iterable[Sequence[int]], n_items: int) -> np.ndarray:
    """Symmetric counts of items consumed back to back by the same user."""
    counts = np.zeros((n_items, n_items))
    for seq in interactions:
        seq = np.asarray(seq, dtype=np.int64)
        a, b = seq[:-1], seq[1:]
        keep = a != b
        np.add.at(counts, (a[keep], b[keep]), 1.0)
        np.add.at(counts, (b[keep], a[keep]), 1.0)
    return counts


def factorize(
    matrix: np.ndarray,
    rank: int,
    sweeps: int,
    seed: int,
    unobserved_weight: float = 0.1,
    reg: float = 0.1,
) -> np.ndarray:
    """Weighted ALS on log1p(counts); returns the row factors.

    Observed (non-zero) entries get weight 1, zeros get
    ``unobserved_weight`` so that items never co-consumed are pushed apart.
    """
    target = np.log1p(matrix)
    weights = np.where(matrix > 0, 1.0, unobserved_weight)
    rng = np.random.default_rng(seed)
    n = matrix.shape[0]
    u = rng.normal(0.0, 0.1, size=(n, rank))
    v = rng.normal(0.0, 0.1, size=(n, rank))
    eye = reg * np.eye(rank)

    def solve(fixed, w, m):
        gram = np.einsum("ij,jk,jl->ikl", w, fixed, fixed) + eye
        rhs = (w * m) @ fixed
        return np.linalg.solve(gram, rhs[..., None])[..., 0]

    for _ in range(sweeps):
        u = solve(v, weights, target)
        v = solve(u, weights.T, target.T)
    return u


def build_topic_clusters(
    interactions: Sequence[Sequence[int]],
    k: int,
    embedding_dim: int = 8,
    seed: int = 0,
    n_items: int | None = None,
    als_sweeps: int = 20,
    kmeans_iters: int = 50,
) -> TopicModel:
    """Co-occurrence -> ALS item embeddings -> k-means++ clusters."""
    from sklearn.cluster import KMeans

    interactions = [np.asarray(s, dtype=np.int64) for s in interactions if len(s)]
    if not interactions:
        raise ValueError("no interactions to cluster")
    seen = np.unique(np.concatenate(interactions))
    if k > len(seen):
        raise ValueError(f"k={k} exceeds the {len(seen)} distinct items")
    n_items = int(seen.max()) + 1 if n_items is None else n_items
    emb = factorize(cooccurrence_matrix(interactions, n_items), embedding_dim, als_sweeps, seed)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    if k == 1:
        return TopicModel(embeddings=emb, assignment=np.zeros(n_items, dtype=np.int64), k=1)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=kmeans_iters, random_state=seed)
    km.fit(emb[seen])
    assignment = km.predict(emb).astype(np.int64)
    return TopicModel(embeddings=emb, assignment=assignment, k=k)


# ---------------------------------------------------------------------------
# cohort report and probe
# ---------------------------------------------------------------------------

def cohort_masks(item_new, topic_new, s_past, s_future) -> dict[str, np.ndarray]:
    changed = search_changed(s_past, s_future)
    item_new, topic_new = np.asarray(item_new, bool), np.asarray(topic_new, bool)
    return {
        "new_item": item_new,
        "old_item": ~item_new,
        "new_topic": topic_new,
        "old_topic": ~topic_new,
        "search_changed": changed,
        "search_unchanged": ~changed,
    }


def mean_and_stderr(values: np.ndarray) -> tuple[float | None, float | None]:
    n = len(values)
    if n == 0:
        return None, None
    mean = float(values.mean())
    if n < 2:
        return mean, None
    return mean, float(values.std(ddof=1) / math.sqrt(n))


def surprise_rows(kl: np.ndarray, cohorts: dict[str, np.ndarray], training_step: int) -> list[dict]:
    rows = []
    for name in COHORTS:
        vals = kl[cohorts[name]]
        mean, se = mean_and_stderr(vals)
        rows.append(
            {"training_step": training_step, "cohort": name, "mean_kl": mean, "count": len(vals), "stderr": se}
        )
    return rows


def surprise_report(
    checkpoints: Sequence[tuple[int, li.IntentModuleParams]],
    x: np.ndarray,
    y: np.ndarray,
    cohorts: dict[str, np.ndarray],
) -> list[dict]:
    """Per-cohort mean KL for every (training_step, intent params) checkpoint."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    rows = []
    for training_step, params in checkpoints:
        rows.extend(surprise_rows(posterior_prior_kl(params, x, y), cohorts, training_step))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def split_users(users: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    unique = np.unique(users)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(unique)
    n_test = max(1, int(round(test_fraction * len(unique))))
    if n_test >= len(unique):
        raise ValueError("need at least two users to split train and test")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def intent_probe(
    z: np.ndarray,
    regimes: np.ndarray,
    users: np.ndarray,
    test_fraction: float = 0.5,
    seed: int = 0,
) -> ProbeResult:
    """Multinomial logistic regression from z to regime, evaluated on unseen users."""
    from sklearn.linear_model import LogisticRegression

    z, regimes, users = np.asarray(z), np.asarray(regimes), np.asarray(users)
    if len(np.unique(regimes)) < 2:
        raise ValueError("intent probe needs at least two distinct regimes")
    train_users, test_users = split_users(users, test_fraction, seed)
    train = np.isin(users, train_users)
    test = np.isin(users, test_users)
    if len(np.unique(regimes[train])) < 2:
        raise ValueError("probe training split contains a single regime")
    clf = LogisticRegression(max_iter=1000)
    clf.fit(z[train], regimes[train])
    correct = clf.predict(z[test]) == regimes[test]
    majority = np.bincount(regimes[train]).argmax()
    baseline = float(np.mean(regimes[test] == majority))
    acc = float(correct.mean())
    n_test = int(test.sum())
    return ProbeResult(
        accuracy=acc,
        baseline=baseline,
        stderr=math.sqrt(max(baseline * (1 - baseline), 1e-12) / n_test),
        n_train=int(train.sum()),
        n_test=n_test,
    )
