import math

import numpy as np
import pytest

from intentrec import simulator as sim


@pytest.fixture(scope="module")
def small_config():
    return sim.SimConfig(catalog_size=80, traj_len=120, seed=3)


def test_dimensions():
    assert sim.D_Y == 8
    assert sim.D_X == 16
    assert sim.EVENT_COLUMNS[-8:] == sim.CHANNELS


def test_default_regimes_have_search_contrast():
    regimes = sim.default_regimes()
    search = [r.rates[sim.SEARCH_CHANNEL] for r in regimes]
    assert min(search) == 0.0 and max(search) >= 2.0
    for r in regimes:
        assert sum(r.topic_preference) == pytest.approx(1.0)


def test_regime_validation():
    with pytest.raises(ValueError):
        sim.IntentRegime(0, (0.5, 0.6), (1.0,) * 8)
    with pytest.raises(ValueError):
        sim.IntentRegime(0, (0.5, 0.5), (1.0,) * 7)
    with pytest.raises(ValueError):
        sim.SimConfig(n_intents=3)


def test_item_topics_cover_catalog():
    cfg = sim.SimConfig(catalog_size=50, n_topics=8)
    assert len(cfg.item_topics) == 50
    assert set(cfg.item_topics) == set(range(8))
    assert np.all(np.diff(cfg.item_topics) >= 0)


def test_no_switching_keeps_single_regime():
    cfg = sim.SimConfig(switch_prob=0.0, traj_len=300)
    traj = sim.simulate_user(cfg, 11)
    assert len(set(traj.regimes)) == 1
    assert not traj.switches.any()


def test_switch_flags_consistent_with_regimes(small_config):
    traj = sim.simulate_user(small_config, 5)
    changed = np.r_[False, traj.regimes[1:] != traj.regimes[:-1]]
    np.testing.assert_array_equal(traj.switches, changed)


def test_same_seed_same_trajectory(small_config):
    a = sim.simulate_user(small_config, 99)
    b = sim.simulate_user(small_config, 99)
    assert a.equals(b)


def test_click_rate_matches_poisson_mean():
    cfg = sim.SimConfig(switch_prob=0.0, traj_len=100_000)
    traj = sim.simulate_user(cfg, 2)
    rates = cfg.regimes[traj.regimes[0]].rates
    for c, rate in enumerate(rates):
        observed = traj.counts[:, c].mean()
        se = math.sqrt(rate / len(traj)) if rate > 0 else 0.0
        assert abs(observed - rate) <= 3 * se
    clicks = traj.counts[:, 0].mean()
    assert abs(clicks - rates[0]) <= 0.01 * rates[0]


def test_repeat_stays_within_spell():
    cfg = sim.SimConfig(repeat_prob=1.0, switch_prob=0.05, traj_len=400)
    traj = sim.simulate_user(cfg, 4)
    starts = np.flatnonzero(np.r_[True, traj.switches[1:]])
    for lo, hi in zip(starts, np.r_[starts[1:], len(traj)]):
        # with certain repetition a spell consumes only its first item
        assert len(set(traj.items[lo:hi])) == 1


def test_repeat_zero_gives_mostly_new_items():
    cfg = sim.SimConfig(repeat_prob=0.0, traj_len=200)
    traj = sim.simulate_user(cfg, 4)
    assert len(set(traj.items)) > 120


def test_features_log1p_and_one_hots(small_config):
    traj = sim.simulate_user(small_config, 6)
    f = sim.behavior_features(traj, 0)
    assert not f.x[:8].any()  # no past at step 0
    ctx = f.x[8:]
    assert ctx[:4].sum() == 1.0 and ctx[4:].sum() == 1.0
    traj.counts[3:8] = 0
    traj.counts[5, 0] = 3
    f = sim.behavior_features(traj, 8)
    assert f.x[0] == pytest.approx(math.log(4))
    assert f.x[0] == pytest.approx(1.386294, abs=1e-6)


def test_features_do_not_leak_future(small_config):
    traj = sim.simulate_user(small_config, 7)
    t = 50
    before = sim.behavior_features(traj, t)
    traj.counts[t:] += 5
    after = sim.behavior_features(traj, t)
    np.testing.assert_array_equal(before.x, after.x)
    assert not np.array_equal(before.y, after.y)


def test_vectorised_features_match_per_step(small_config):
    traj = sim.simulate_user(small_config, 8)
    feats = sim.trajectory_features(traj)
    for t in (0, 1, 4, 5, 60, len(traj) - 1):
        f = sim.behavior_features(traj, t)
        np.testing.assert_allclose(feats["x"][t], f.x)
        np.testing.assert_allclose(feats["y"][t], f.y)
        assert feats["s_past"][t] == f.s_past and feats["s_future"][t] == f.s_future


def test_behavior_features_range_check(small_config):
    traj = sim.simulate_user(small_config, 9)
    with pytest.raises(IndexError):
        sim.behavior_features(traj, len(traj))


def test_single_user_dataset_equals_simulate_user(small_config):
    (only,) = sim.generate_dataset(small_config, 1, seed=5)
    assert only.equals(sim.simulate_user(small_config, sim.derive_user_seed(5, 0)))


def test_users_differ(small_config):
    users = sim.generate_dataset(small_config, 20)
    keys = {u.items.tobytes() for u in users}
    assert len(keys) == 20


def test_user_seed_is_64_bit_and_stable():
    s = sim.derive_user_seed(0, 0)
    assert 0 <= s < 2**64
    assert s == sim.derive_user_seed(0, 0)
    assert s != sim.derive_user_seed(0, 1) != sim.derive_user_seed(1, 0)


def test_dataset_files_round_trip(tmp_path, small_config):
    users = sim.generate_dataset(small_config, 5, out_dir=tmp_path / "a")
    lines = (tmp_path / "a" / "events.csv").read_text().splitlines()
    assert lines[0] == ",".join(sim.EVENT_COLUMNS)
    assert len(lines) == 1 + 5 * small_config.traj_len
    loaded = sim.load_dataset(tmp_path / "a", window=small_config.window)
    assert all(a.equals(b) for a, b in zip(users, loaded))
    sim.generate_dataset(small_config, 5, out_dir=tmp_path / "b")
    for name in ("events.csv", "catalog.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_rejects_bad_header(tmp_path):
    (tmp_path / "events.csv").write_text("user,step\n0,0\n")
    with pytest.raises(ValueError):
        sim.load_dataset(tmp_path, window=5)
