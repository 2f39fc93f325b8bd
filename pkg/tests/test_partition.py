import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtm.partition import (
    _mod_rule_in_region,
    center_mask,
    region_factors,
    sample_targets_weighted,
    select_targets,
    targets_boundary,
    targets_center,
    targets_motion,
    targets_naive,
    targets_saliency,
)
from vtm.tokens import STRATEGIES, TokenError, TokenTensor


def grid_tokens(L, H, W, motion=None) -> TokenTensor:
    return TokenTensor.from_grid(np.zeros((L, H, W, 2)), motion)


def test_naive_examples():
    assert targets_naive(grid_tokens(1, 2, 4), 4).tolist() == [0, 4]
    assert targets_naive(grid_tokens(1, 1, 5), 5).tolist() == [0]


def test_center_4x4_hand_enumeration():
    t = grid_tokens(1, 4, 4)
    assert np.flatnonzero(center_mask(t.coords, 4, 4)).tolist() == [5, 6, 9, 10]
    assert region_factors(4) == (2, 6)
    # center tokens 5,6,9,10 at factor 2 -> 5,9; boundary 0,1,2,3,4,7,8,... at factor 6 -> 0,8
    assert targets_center(t, 4).tolist() == [0, 5, 8, 9]


def test_boundary_4x4_mirrors_center():
    t = grid_tokens(1, 4, 4)
    out = targets_boundary(t, 4)
    inside = center_mask(t.coords, 4, 4)
    assert len(out) == 4 and inside[out].sum() == 2
    # boundary at factor 2 -> 0,2 ; center at factor 6 -> 5 then topped up with 6
    assert out.tolist() == [0, 2, 5, 6]


def test_gamma_two_degenerate_factors():
    t = grid_tokens(1, 4, 4)
    assert region_factors(2) == (1, 3)
    assert set(targets_center(t, 2).tolist()) >= {5, 6, 9, 10}
    # factor 1 makes every boundary token a candidate
    frames = t.coords[:, 0]
    boundary = np.flatnonzero(~center_mask(t.coords, 4, 4))
    assert _mod_rule_in_region(frames, boundary, 1).tolist() == boundary.tolist()
    out = targets_boundary(t, 2)
    assert len(out) == 8 and (~center_mask(t.coords, 4, 4))[out].sum() == 4


def test_region_rules_need_room():
    with pytest.raises(TokenError):
        targets_center(grid_tokens(4, 1, 4), 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(2, 9), st.integers(2, 9), st.integers(2, 8))
def test_center_quota(L, H, W, gamma):
    t = grid_tokens(L, H, W)
    if t.n < gamma:
        return
    for fn, favoured in ((targets_center, True), (targets_boundary, False)):
        out = fn(t, gamma)
        inside = center_mask(t.coords, H, W)
        region = inside if favoured else ~inside
        k = t.n // gamma
        want = min((k + 1) // 2, int(region.sum()))
        want = max(want, k - int((~region).sum()))
        assert len(out) == k and len(set(out.tolist())) == k
        assert int(region[out].sum()) == want


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(STRATEGIES), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6),
       st.integers(2, 7), st.integers(0, 1000))
def test_every_strategy_returns_floor_n_over_gamma(strategy, L, H, W, gamma, seed):
    rng = np.random.default_rng(seed)
    t = grid_tokens(L, H, W, rng.uniform(0, 5, L * H * W))
    if t.n < gamma:
        return
    sal = rng.uniform(-1, 1, t.n)
    a = select_targets(strategy, t, gamma, seed, sal)
    b = select_targets(strategy, t, gamma, seed, sal)
    assert len(a) == t.n // gamma == len(np.unique(a))
    assert a.min() >= 0 and a.max() < t.n
    assert np.all(np.diff(a) > 0)
    np.testing.assert_array_equal(a, b)


def test_sample_all_when_count_is_n():
    assert sample_targets_weighted([0.3, 0.3, 0.3, 0.3], 4, 0).tolist() == [0, 1, 2, 3]


def test_sample_count_too_large():
    with pytest.raises(TokenError):
        sample_targets_weighted([0.0, 0.0], 3, 0)


def test_dominant_weight_wins():
    rng = np.random.default_rng(0)
    hits = sum(sample_targets_weighted([10.0, -10.0, -10.0, -10.0], 1, rng)[0] == 0 for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_equal_pair_is_fair():
    rng = np.random.default_rng(1)
    zeros = sum(sample_targets_weighted([0.0, 0.0], 1, rng)[0] == 0 for _ in range(10_000))
    assert abs(zeros / 10_000 - 0.5) < 0.02


def test_high_motion_token_selected():
    rng = np.random.default_rng(2)
    motion = np.zeros(8)
    motion[5] = 100.0
    t = grid_tokens(1, 2, 4, motion)
    hits = sum(targets_motion(t, 8, rng).tolist() == [5] for _ in range(2000))
    assert hits / 2000 > 0.999


def test_zero_motion_is_uniform():
    rng = np.random.default_rng(3)
    t = grid_tokens(1, 2, 4)
    counts = np.zeros(8)
    for _ in range(20_000):
        counts[targets_motion(t, 4, rng)] += 1
    # 2 of 8 tokens picked -> inclusion probability 1/4 each
    np.testing.assert_allclose(counts / 20_000, 0.25, atol=0.02)


def test_saliency_ratio_bounded_by_e_squared():
    rng = np.random.default_rng(4)
    s = np.array([0.999, -0.999, 0.0, 0.5])
    counts = np.zeros(4)
    n = 200_000
    for _ in range(n // 1000):
        keys = s + rng.gumbel(size=(1000, 4))
        counts += np.bincount(keys.argmax(axis=1), minlength=4)
    assert counts.max() / counts.min() <= np.e ** 2
    assert targets_saliency(s, 4, 0).shape == (1,)


def test_first_pick_marginals_match_softmax():
    rng = np.random.default_rng(5)
    w = rng.normal(0, 1, 12)
    p = np.exp(w - w.max())
    p /= p.sum()
    draws = 100_000
    counts = np.zeros(12)
    for _ in range(draws):
        counts[sample_targets_weighted(w, 1, rng)[0]] += 1
    assert np.abs(counts / draws - p).max() < 0.01
