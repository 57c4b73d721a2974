import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from efm.dataset import (
    Episode,
    EpisodeStore,
    SamplerConfig,
    decode_store,
    encode_store,
    load_store,
    sample_batch,
    sample_tuple,
    sample_unrelated_goal,
    sample_unrelated_goals,
    save_store,
)
from efm.errors import ContractError, FormatError


def ramp_episode(T, offset=0.0, dim_o=2, dim_a=1):
    """Observation row k encodes k itself, so indices can be recovered from values."""
    obs = np.stack([np.arange(T) + offset] + [np.full(T, offset)] * (dim_o - 1), axis=1)
    act = 100 + np.arange(T)[:, None] + offset * np.ones((T, dim_a))
    return Episode(obs, act)


def test_zero_horizon_goal_is_current_observation():
    store = EpisodeStore([ramp_episode(10)])
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(L_g=5)
    hits = 0
    for _ in range(400):
        t = sample_tuple(store, cfg, rng)
        if t.k == 3 and t.d == 0:
            np.testing.assert_array_equal(t.g, store.obs_all[3])
            hits += 1
    assert hits > 0


def test_goal_horizon_and_identity():
    store = EpisodeStore([ramp_episode(10)])
    b = sample_batch(store, SamplerConfig(L_g=5), np.random.default_rng(1), 2000)
    at3 = b.k == 3
    assert set(b.d[at3]) == set(range(6))
    np.testing.assert_array_equal(b.g[:, 0], b.k + b.d)
    assert np.all(b.d <= np.minimum(5, 9 - b.k))


def test_action_window_stride_and_clamp():
    store = EpisodeStore([ramp_episode(60)])
    cfg = SamplerConfig(L_a=16, S_a=3, L_g=5)
    b = sample_batch(store, cfg, np.random.default_rng(2), 500)
    expected = np.minimum(b.k[:, None] + 3 * np.arange(16), 59) + 100
    np.testing.assert_array_equal(b.tau_a[:, :, 0], expected)
    np.testing.assert_array_equal(b.tau_o[:, 0], b.o)


def test_window_alignment_and_hindsight_property():
    eps = [ramp_episode(T, offset=1000 * i) for i, T in enumerate((7, 40, 13))]
    store = EpisodeStore(eps)
    cfg = SamplerConfig(L_o=4, S_o=2, L_g=9)
    b = sample_batch(store, cfg, np.random.default_rng(3), 3000)
    for i in range(len(b)):
        ep = store.episodes[b.episode[i]]
        k, d = b.k[i], b.d[i]
        np.testing.assert_array_equal(b.o[i], ep.observations[k])
        np.testing.assert_array_equal(b.g[i], ep.observations[k + d])
        idx = np.minimum(k + 2 * np.arange(4), len(ep) - 1)
        np.testing.assert_array_equal(b.tau_o[i], ep.observations[idx])


def test_d_uniform_on_long_episodes():
    store = EpisodeStore([ramp_episode(20000)])
    b = sample_batch(store, SamplerConfig(L_g=10), np.random.default_rng(4), 10000)
    counts = np.bincount(b.d, minlength=11)
    assert chisquare(counts).pvalue > 0.01


def test_timesteps_equally_likely():
    store = EpisodeStore([ramp_episode(10), ramp_episode(30, 1000)])
    b = sample_batch(store, SamplerConfig(L_g=3), np.random.default_rng(5), 20000)
    assert abs(np.mean(b.episode == 1) - 0.75) < 0.02


def test_unrelated_goal_uniform_single_episode():
    store = EpisodeStore([ramp_episode(10)])
    g = sample_unrelated_goals(store, np.random.default_rng(6), 10000)
    counts = np.bincount(g[:, 0].astype(int), minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_unrelated_goal_proportional_to_length():
    store = EpisodeStore([ramp_episode(10), ramp_episode(30, 1000)])
    g = sample_unrelated_goals(store, np.random.default_rng(7), 20000)
    assert abs(np.mean(g[:, 1] == 1000) - 0.75) < 0.02


def test_unrelated_goal_reproducible():
    store = EpisodeStore([ramp_episode(10)])
    a = [sample_unrelated_goal(store, np.random.default_rng(8)) for _ in range(3)]
    b = [sample_unrelated_goal(store, np.random.default_rng(8)) for _ in range(3)]
    np.testing.assert_array_equal(a, b)


def test_empty_store_cannot_sample():
    store = EpisodeStore([], dim_o=2, dim_a=1)
    with pytest.raises(ContractError):
        sample_unrelated_goal(store, np.random.default_rng(0))


def test_short_episode_rejected():
    with pytest.raises(ContractError):
        Episode(np.zeros((1, 2)), np.zeros((1, 1)))


def test_empty_store_file(tmp_path):
    store = EpisodeStore([], dim_o=4, dim_a=2)
    path = tmp_path / "empty.efed"
    save_store(store, path)
    back = load_store(path)
    assert len(back) == 0 and back.dim_o == 4 and back.dim_a == 2
    assert path.stat().st_size == 20 + 4 * (4 + 4 + 2 + 2)


def test_store_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    eps = [Episode(rng.normal(size=(T, 4)), rng.normal(size=(T, 2))) for T in (5, 17, 2)]
    store = EpisodeStore(eps)
    raw = encode_store(store)
    back = decode_store(raw)
    assert encode_store(back) == raw
    for a, b in zip(store.episodes, back.episodes):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()
    for a, b in zip(store.stats, back.stats):
        np.testing.assert_array_equal(a, b)


def test_header_claims_more_episodes():
    raw = bytearray(encode_store(EpisodeStore([ramp_episode(5)])))
    raw[16:20] = (2).to_bytes(4, "little")
    with pytest.raises(FormatError) as info:
        decode_store(bytes(raw))
    assert info.value.offset > 20


def test_truncated_and_bad_magic():
    raw = encode_store(EpisodeStore([ramp_episode(5)]))
    with pytest.raises(FormatError):
        decode_store(raw[:-1])
    with pytest.raises(FormatError) as info:
        decode_store(b"NOPE" + raw[4:])
    assert info.value.offset == 0


def test_normalisation_roundtrip():
    store = EpisodeStore([ramp_episode(50), ramp_episode(20, 3.0)])
    x = store.obs_all[:7]
    np.testing.assert_allclose(store.denormalize_obs(store.normalize_obs(x)), x, rtol=1e-5, atol=1e-4)
    z = store.normalize_obs(store.obs_all)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(
    lengths=st.lists(st.integers(2, 30), min_size=1, max_size=4),
    L_o=st.integers(1, 5), S_o=st.integers(1, 4), L_g=st.integers(1, 12), seed=st.integers(0, 999),
)
def test_tuple_invariants_property(lengths, L_o, S_o, L_g, seed):
    store = EpisodeStore([ramp_episode(T, offset=1000 * i) for i, T in enumerate(lengths)])
    b = sample_batch(store, SamplerConfig(L_o=L_o, S_o=S_o, L_g=L_g), np.random.default_rng(seed), 64)
    assert np.all(b.d >= 0) and np.all(b.d <= L_g)
    np.testing.assert_array_equal(b.g[:, 0] - b.o[:, 0], b.d)
    np.testing.assert_array_equal(b.tau_o[:, 0], b.o)
    assert np.all(b.g[:, 1] == b.o[:, 1])
