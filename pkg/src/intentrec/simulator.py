"""Synthetic users whose behavior and consumption are driven by a hidden intent regime.

Each user follows a Markov regime-switching process. At every step the
current regime sets Poisson rates for eight behavior channels and a topic
preference for the consumed item; with the regime's ``repeat_prob`` the
user instead re-consumes an item from the current regime spell. Past-window and future-window counts
are therefore independent given the regime, which is exactly the
structure the latent intent model assumes.

Per-user random streams: user ``i`` of a dataset generated with master
seed ``s`` draws from ``numpy.random.default_rng(derive_user_seed(s, i))``,
where the user seed is the first 64 bits of ``SeedSequence([s, i])``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CHANNELS = (
    "clicks",
    "searches",
    "likes",
    "shares",
    "skips",
    "comments",
    "subscribes",
    "saves",
)
SEARCH_CHANNEL = CHANNELS.index("searches")
N_TIME_BUCKETS = 4
N_DEVICES = 4

D_Y = len(CHANNELS)
D_X = len(CHANNELS) + N_TIME_BUCKETS + N_DEVICES

EVENT_COLUMNS = (
    "user_id",
    "step",
    "item_id",
    "topic_id",
    "regime_id",
    "switch",
    "time_bucket",
    "device",
) + CHANNELS


@dataclass(frozen=True)
class IntentRegime:
    id: int
    topic_preference: tuple[float, ...]
    rates: tuple[float, ...]
    switch_prob: float = 0.05
    repeat_prob: float = 0.0

    def __post_init__(self):
        pref = np.asarray(self.topic_preference)
        if np.any(pref < 0) or not np.isclose(pref.sum(), 1.0):
            raise ValueError(f"regime {self.id}: topic preference must be a distribution")
        if len(self.rates) != len(CHANNELS) or min(self.rates) < 0:
            raise ValueError(f"regime {self.id}: need {len(CHANNELS)} non-negative rates")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError(f"regime {self.id}: switch_prob must lie in [0, 1]")
        if not 0.0 <= self.repeat_prob <= 1.0:
            raise ValueError(f"regime {self.id}: repeat_prob must lie in [0, 1]")

    @property
    def preferred_topic(self) -> int:
        return int(np.argmax(self.topic_preference))


def _preference(n_topics: int, favored: Sequence[int], mass: float) -> tuple[float, ...]:
    pref = np.full(n_topics, (1.0 - mass) / max(n_topics - len(favored), 1))
    if len(favored) == n_topics:
        pref[:] = 1.0 / n_topics
    else:
        pref[list(favored)] = mass / len(favored)
    return tuple(float(p) for p in pref / pref.sum())


def default_regimes(
    n_topics: int = 8, switch_prob: float = 0.05, repeat_prob: float = 0.3
) -> tuple[IntentRegime, ...]:
    """Four regimes: casual browsing, search-driven, binge, exploration.

    Search rates are zero for browsing and binge and high for the
    search-driven regime, so regime switches show up as search changes.
    """
    t = n_topics
    specs = [
        # clicks searches likes shares skips comments subscribes saves
        ([0, 1, 2], (2.0, 0.0, 0.3, 0.05, 1.5, 0.05, 0.02, 0.1)),
        ([2, 3, 4], (0.8, 2.0, 0.2, 0.1, 0.3, 0.1, 0.05, 0.4)),
        ([5, 6], (3.5, 0.0, 1.0, 0.2, 0.2, 0.4, 0.2, 0.2)),
        (list(range(t)), (1.5, 0.6, 0.3, 0.3, 1.0, 0.1, 0.1, 0.3)),
    ]
    regimes = []
    for i, (favored, rates) in enumerate(specs):
        favored = [f % t for f in favored]
        regimes.append(
            IntentRegime(
                id=i,
                topic_preference=_preference(t, sorted(set(favored)), 0.9),
                rates=rates,
                switch_prob=switch_prob,
                repeat_prob=repeat_prob,
            )
        )
    return tuple(regimes)


@dataclass(frozen=True)
class SimConfig:
    n_intents: int = 4
    n_topics: int = 8
    catalog_size: int = 500
    traj_len: int = 200
    window: int = 5
    switch_prob: float = 0.05
    repeat_prob: float = 0.3
    device_change_prob: float = 0.02
    seed: int = 0
    regimes: tuple[IntentRegime, ...] = field(default=())

    def __post_init__(self):
        for name in ("n_intents", "n_topics", "catalog_size", "traj_len", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.catalog_size < self.n_topics:
            raise ValueError("catalog_size must be at least n_topics")
        for name in ("switch_prob", "repeat_prob", "device_change_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"SimConfig.{name} must lie in [0, 1]")
        if not self.regimes:
            regimes = default_regimes(self.n_topics, self.switch_prob, self.repeat_prob)
            if self.n_intents != len(regimes):
                raise ValueError(
                    f"default regimes define {len(regimes)} intents, n_intents={self.n_intents}"
                )
            object.__setattr__(self, "regimes", regimes)
        if len(self.regimes) != self.n_intents:
            raise ValueError("number of regimes must equal n_intents")
        for r in self.regimes:
            if len(r.topic_preference) != self.n_topics:
                raise ValueError(f"regime {r.id} preference has wrong number of topics")

    @property
    def item_topics(self) -> np.ndarray:
        """Topic of each item; the catalog is cut into contiguous blocks."""
        return (np.arange(self.catalog_size) * self.n_topics) // self.catalog_size

    @property
    def items_per_topic(self) -> np.ndarray:
        return np.bincount(self.item_topics, minlength=self.n_topics)


@dataclass(frozen=True)
class BehaviorFeatures:
    x: np.ndarray
    y: np.ndarray
    s_past: int
    s_future: int


@dataclass(frozen=True)
class InteractionEvent:
    item_id: int
    timestamp: int
    features: BehaviorFeatures | None = None


@dataclass
class Trajectory:
    """One user's simulated history; arrays are indexed by step."""

    user_id: int
    items: np.ndarray
    topics: np.ndarray
    regimes: np.ndarray
    switches: np.ndarray
    counts: np.ndarray  # (T, n_channels)
    time_bucket: np.ndarray
    device: np.ndarray
    window: int = 5

    def __len__(self) -> int:
        return len(self.items)

    @property
    def events(self) -> list[InteractionEvent]:
        return [InteractionEvent(int(i), t) for t, i in enumerate(self.items)]

    def iter_events(self, with_features: bool = False) -> Iterator[InteractionEvent]:
        for t, item in enumerate(self.items):
            feats = behavior_features(self, t) if with_features else None
            yield InteractionEvent(int(item), t, feats)

    def equals(self, other: "Trajectory") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("items", "topics", "regimes", "switches", "counts", "time_bucket", "device")
        )


def derive_user_seed(seed: int, user_index: int) -> int:
    """64-bit per-user seed from the master seed and the user's index."""
    state = np.random.SeedSequence([int(seed), int(user_index)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def simulate_user(config: SimConfig, user_seed: int, user_id: int = 0) -> Trajectory:
    rng = np.random.default_rng(user_seed)
    n_steps, k = config.traj_len, config.n_intents
    item_topics = config.item_topics
    topic_items = [np.flatnonzero(item_topics == t) for t in range(config.n_topics)]
    rates = np.array([r.rates for r in config.regimes])
    prefs = np.array([r.topic_preference for r in config.regimes])
    switch_p = np.array([r.switch_prob for r in config.regimes])

    regimes = np.empty(n_steps, dtype=np.int64)
    switches = np.zeros(n_steps, dtype=bool)
    regimes[0] = rng.integers(k)
    switch_draws = rng.random(n_steps)
    other_draws = rng.integers(k - 1, size=n_steps) if k > 1 else np.zeros(n_steps, int)
    for t in range(1, n_steps):
        prev = regimes[t - 1]
        if k > 1 and switch_draws[t] < switch_p[prev]:
            nxt = other_draws[t]
            regimes[t] = nxt + (nxt >= prev)
            switches[t] = True
        else:
            regimes[t] = prev

    counts = rng.poisson(rates[regimes])
    cum_prefs = np.cumsum(prefs, axis=1)
    topics = (cum_prefs[regimes] < rng.random(n_steps)[:, None]).sum(axis=1)
    topics = np.minimum(topics, config.n_topics - 1)
    sizes = np.array([len(ix) for ix in topic_items])
    starts = np.array([ix[0] for ix in topic_items])
    items = starts[topics] + (rng.random(n_steps) * sizes[topics]).astype(np.int64)

    # re-consumption: with the regime's repeat_prob, pick again an item already
    # consumed during the current regime spell (never across a switch)
    repeat_p = np.array([r.repeat_prob for r in config.regimes])
    repeat_draws = rng.random(n_steps)
    pick_draws = rng.random(n_steps)
    spell_start = 0
    for t in range(n_steps):
        if switches[t]:
            spell_start = t
        if t > spell_start and repeat_draws[t] < repeat_p[regimes[t]]:
            src = spell_start + int(pick_draws[t] * (t - spell_start))
            items[t] = items[src]
            topics[t] = topics[src]

    start_bucket = rng.integers(N_TIME_BUCKETS)
    per_bucket = max(n_steps // N_TIME_BUCKETS, 1)
    time_bucket = (start_bucket + np.arange(n_steps) // per_bucket) % N_TIME_BUCKETS
    device = np.empty(n_steps, dtype=np.int64)
    device[0] = rng.integers(N_DEVICES)
    dev_switch = rng.random(n_steps) < config.device_change_prob
    dev_draws = rng.integers(N_DEVICES, size=n_steps)
    for t in range(1, n_steps):
        device[t] = dev_draws[t] if dev_switch[t] else device[t - 1]

    return Trajectory(
        user_id=user_id,
        items=items.astype(np.int64),
        topics=topics,
        regimes=regimes,
        switches=switches,
        counts=counts.astype(np.int64),
        time_bucket=time_bucket.astype(np.int64),
        device=device,
        window=config.window,
    )


def _context(traj: Trajectory, t) -> np.ndarray:
    t = np.atleast_1d(t)
    ctx = np.zeros((len(t), N_TIME_BUCKETS + N_DEVICES))
    ctx[np.arange(len(t)), traj.time_bucket[t]] = 1.0
    ctx[np.arange(len(t)), N_TIME_BUCKETS + traj.device[t]] = 1.0
    return ctx


def behavior_features(traj: Trajectory, t: int) -> BehaviorFeatures:
    """x from steps [t - w, t) plus context at t; y from steps [t, t + w)."""
    n = len(traj)
    if not 0 <= t < n:
        raise IndexError(f"step {t} outside trajectory of length {n}")
    w = traj.window
    past = traj.counts[max(t - w, 0):t].sum(axis=0)
    future = traj.counts[t:min(t + w, n)].sum(axis=0)
    x = np.concatenate([np.log1p(past), _context(traj, t)[0]])
    y = np.log1p(future.astype(np.float64))
    return BehaviorFeatures(
        x=x, y=y, s_past=int(past[SEARCH_CHANNEL]), s_future=int(future[SEARCH_CHANNEL])
    )


def trajectory_features(traj: Trajectory) -> dict[str, np.ndarray]:
    """Vectorised :func:`behavior_features` for every step at once."""
    n, w = len(traj), traj.window
    csum = np.vstack([np.zeros((1, traj.counts.shape[1]), dtype=np.int64), np.cumsum(traj.counts, axis=0)])
    t = np.arange(n)
    past = csum[t] - csum[np.maximum(t - w, 0)]
    future = csum[np.minimum(t + w, n)] - csum[t]
    x = np.hstack([np.log1p(past), _context(traj, t)])
    return {
        "x": x,
        "y": np.log1p(future.astype(np.float64)),
        "s_past": past[:, SEARCH_CHANNEL],
        "s_future": future[:, SEARCH_CHANNEL],
    }


def generate_dataset(
    config: SimConfig, n_users: int, seed: int | None = None, out_dir: str | os.PathLike | None = None
) -> list[Trajectory]:
    """Simulate ``n_users`` users and optionally write them with :func:`write_dataset`."""
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    seed = config.seed if seed is None else seed
    users = [simulate_user(config, derive_user_seed(seed, i), user_id=i) for i in range(n_users)]
    if out_dir is not None:
        write_dataset(users, config, out_dir)
    return users


def write_dataset(users: Sequence[Trajectory], config: SimConfig, out_dir) -> None:
    """``events.csv`` (one event per line) and ``catalog.csv`` (item -> topic)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    with open(out / "events.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for u in users:
            for t in range(len(u)):
                writer.writerow(
                    [u.user_id, t, u.items[t], u.topics[t], u.regimes[t], int(u.switches[t]),
                     u.time_bucket[t], u.device[t], *u.counts[t].tolist()]
                )
    with open(out / "catalog.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("item_id", "topic_id"))
        for i, tp in enumerate(config.item_topics):
            writer.writerow((i, int(tp)))


def load_dataset(data_dir, window: int) -> list[Trajectory]:
    path = Path(data_dir) / "events.csv"
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != EVENT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = np.array([[int(v) for v in row] for row in reader], dtype=np.int64)
    users = []
    if rows.size == 0:
        return users
    boundaries = np.flatnonzero(np.diff(rows[:, 0])) + 1
    for block in np.split(rows, boundaries):
        if not np.array_equal(block[:, 1], np.arange(len(block))):
            raise ValueError(f"{path}: user {block[0, 0]} steps are not 0..T-1 in order")
        users.append(
            Trajectory(
                user_id=int(block[0, 0]),
                items=block[:, 2].copy(),
                topics=block[:, 3].copy(),
                regimes=block[:, 4].copy(),
                switches=block[:, 5].astype(bool),
                counts=block[:, 8:].copy(),
                time_bucket=block[:, 6].copy(),
                device=block[:, 7].copy(),
                window=window,
            )
        )
    return users
