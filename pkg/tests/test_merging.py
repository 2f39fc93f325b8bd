import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtm.autodiff import DomainError
from vtm.merging import (
    apply_plan,
    limit_matches,
    match_sources,
    merge,
    merge_step,
    partition_uniform,
    plan_merge,
)
from vtm.tokens import (
    MatchResult,
    MergeConfig,
    PartitionResult,
    TokenError,
    TokenTensor,
    expected_output_count,
    validate,
)


def tokens_1d(values, sizes=None, motion=None) -> TokenTensor:
    feats = np.asarray(values, dtype=np.float64).reshape(len(values), -1)
    n = len(feats)
    coords = np.stack([np.zeros(n, int), np.zeros(n, int), np.arange(n)], axis=1)
    sizes = np.ones(n, np.int64) if sizes is None else np.asarray(sizes, np.int64)
    return TokenTensor(feats, coords, sizes, (1, 1, n, feats.shape[1]), motion)


def brute_match(keys, targets, sources):
    """Exhaustive pairwise cosine, first maximum wins."""
    out, scores = [], []
    for s in sources:
        best, best_score = None, -np.inf
        for t in targets:
            a, b = keys[s], keys[t]
            c = sum(x * y for x, y in zip(a, b)) / (np.sqrt(sum(x * x for x in a)) * np.sqrt(sum(y * y for y in b)))
            if c > best_score:
                best, best_score = t, c
        out.append(best)
        scores.append(best_score)
    return np.array(out), np.array(scores)


# ---------------------------------------------------------------- token tensor


def test_fresh_grid_is_valid():
    t = TokenTensor.from_grid(np.zeros((2, 2, 2, 3)))
    validate(t)
    assert t.n == 8 and np.all(t.sizes == 1)


def test_validate_size_count_mismatch():
    t = TokenTensor.from_grid(np.zeros((2, 2, 2, 3)))
    bad = TokenTensor(t.features, t.coords, t.sizes[:5], t.grid)
    with pytest.raises(TokenError, match="size count mismatch"):
        validate(bad)


def test_validate_coordinate_out_of_grid():
    t = TokenTensor.from_grid(np.zeros((2, 2, 2, 3)))
    coords = t.coords.copy()
    coords[3, 1] = 2
    with pytest.raises(TokenError, match="coordinate out of grid"):
        validate(TokenTensor(t.features, coords, t.sizes, t.grid))


# ---------------------------------------------------------------- partition


@pytest.mark.parametrize("n,gamma,targets", [(8, 4, [0, 4]), (6, 2, [0, 2, 4]), (5, 5, [0])])
def test_partition_uniform_examples(n, gamma, targets):
    p = partition_uniform(n, gamma)
    assert p.target_idx.tolist() == targets
    assert sorted(p.target_idx.tolist() + p.source_idx.tolist()) == list(range(n))


def test_partition_too_few_tokens():
    with pytest.raises(TokenError, match="too few tokens"):
        partition_uniform(3, 4)


# ---------------------------------------------------------------- matching


def test_match_picks_most_similar_target():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    m = match_sources(keys, PartitionResult.from_targets(3, [0, 1]))
    assert m.match_of.tolist() == [0]
    assert m.score_of[0] == pytest.approx(0.9 / np.sqrt(0.82), abs=1e-12)


def test_source_equal_to_target_scores_one():
    keys = np.array([[0.3, -2.0], [1.0, 1.0], [0.3, -2.0]])
    m = match_sources(keys, PartitionResult.from_targets(3, [0, 1]))
    assert m.match_of.tolist() == [0] and m.score_of[0] == pytest.approx(1.0)


def test_tie_goes_to_lowest_target():
    keys = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    m = match_sources(keys, PartitionResult.from_targets(3, [0, 1]))
    assert m.match_of.tolist() == [0]


def test_zero_norm_key_is_named():
    keys = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DomainError, match="row 1"):
        match_sources(keys, PartitionResult.from_targets(3, [0]))


def test_match_equals_brute_force_20_tokens():
    keys = np.random.default_rng(0).normal(size=(20, 5))
    p = partition_uniform(20, 4)
    m = match_sources(keys, p)
    ref, ref_scores = brute_match(keys, p.target_idx, p.source_idx)
    np.testing.assert_array_equal(m.match_of, ref)
    np.testing.assert_allclose(m.score_of, ref_scores, atol=1e-12)


# ---------------------------------------------------------------- r-limiting


def test_limit_keeps_top_r():
    m = MatchResult(np.array([4, 4, 8]), np.array([0.9, 0.5, 0.7]))
    assert limit_matches(m, 2).match_of.tolist() == [4, -1, 8]


def test_limit_full_and_zero():
    m = MatchResult(np.array([4, 4, 8]), np.array([0.9, 0.5, 0.7]))
    assert limit_matches(m, 3).match_of.tolist() == [4, 4, 8]
    assert limit_matches(m, 0).match_of.tolist() == [-1, -1, -1]
    with pytest.raises(TokenError):
        limit_matches(m, 4)


# ---------------------------------------------------------------- merge


def test_average_merge_example():
    t = tokens_1d([[2.0], [4.0], [6.0]])
    part = PartitionResult.from_targets(3, [0])
    out = merge(t, part, MatchResult(np.array([0, 0]), np.array([1.0, 1.0])))
    assert out.features.tolist() == [[4.0]] and out.sizes.tolist() == [3]


def test_size_weighted_merge_example():
    t = tokens_1d([[1.0], [3.0]], sizes=[3, 1])
    part = PartitionResult.from_targets(2, [0])
    out = merge(t, part, MatchResult(np.array([0]), np.array([1.0])), "size_weighted")
    assert out.features.tolist() == [[1.5]] and out.sizes.tolist() == [4]


def test_no_matches_is_identity():
    t = tokens_1d(np.random.default_rng(1).normal(size=(6, 2)))
    part = partition_uniform(6, 3)
    out = merge(t, part, MatchResult(np.full(4, -1), np.zeros(4)))
    np.testing.assert_array_equal(out.features, t.features)
    np.testing.assert_array_equal(out.coords, t.coords)


def test_inconsistent_match_rejected():
    part = partition_uniform(6, 3)
    with pytest.raises(TokenError):
        plan_merge(part, MatchResult(np.array([1, -1, -1, -1]), np.zeros(4)))
    with pytest.raises(TokenError):
        plan_merge(part, MatchResult(np.array([0]), np.zeros(1)))


@pytest.mark.parametrize("n,gamma,r,expected", [(16, 4, 1.0, 4), (60, 6, 0.8, 20)])
def test_merge_step_counts(n, gamma, r, expected):
    rng = np.random.default_rng(n)
    t = tokens_1d(rng.normal(size=(n, 3)))
    out = merge_step(t, t.features, MergeConfig(gamma, r, "average", "naive"), partition_uniform(n, gamma).target_idx)
    assert out.n == expected == expected_output_count(n, gamma, r)


def test_merge_step_r_zero_is_identity():
    t = tokens_1d(np.random.default_rng(2).normal(size=(12, 3)))
    out = merge_step(t, t.features, MergeConfig(4, 0.0, "average", "naive"), [0, 4, 8])
    np.testing.assert_array_equal(out.features, t.features)


def test_motion_weighted_pooling_and_motion_mean():
    t = tokens_1d([[0.0], [10.0]], sizes=[1, 3], motion=[0.0, 2.0])
    part = PartitionResult.from_targets(2, [0])
    out = merge(t, part, MatchResult(np.array([0]), np.array([1.0])), "motion_weighted")
    eps = 1e-6
    np.testing.assert_allclose(out.features[0, 0], 10.0 * (2 + eps) / (2 + 2 * eps))
    np.testing.assert_allclose(out.motion, [6.0 / 4.0])


# ---------------------------------------------------------------- properties


@st.composite
def merge_instances(draw):
    gamma = draw(st.integers(2, 8))
    n = draw(st.integers(gamma, 64))
    r = draw(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.8, 1.0]) | st.floats(0.0, 1.0))
    seed = draw(st.integers(0, 2**31 - 1))
    return n, gamma, r, seed


def random_tokens(n, seed, c=4):
    rng = np.random.default_rng(seed)
    t = tokens_1d(rng.normal(size=(n, c)), sizes=rng.integers(1, 5, n), motion=rng.uniform(0, 3, n))
    return t, rng.normal(size=(n, 6))


@settings(max_examples=150, deadline=None)
@given(merge_instances(), st.sampled_from(["average", "size_weighted", "motion_weighted"]))
def test_merge_properties(inst, pooling):
    n, gamma, r, seed = inst
    t, keys = random_tokens(n, seed)
    rng = np.random.default_rng(seed + 1)
    targets = np.sort(rng.choice(n, n // gamma, replace=False))
    out = merge_step(t, keys, MergeConfig(gamma, r, pooling, "naive"), targets)
    # count law
    assert out.n == expected_output_count(n, gamma, r)
    # total size is conserved
    assert out.sizes.sum() == t.sizes.sum()
    # output follows ascending representative order and keeps every target
    reps = [int(np.flatnonzero((t.coords == c).all(axis=1))[0]) for c in out.coords]
    assert reps == sorted(reps) and set(targets) <= set(reps)
    # merged features stay inside the per-channel range of the inputs
    assert np.all(out.features <= t.features.max(axis=0) + 1e-9)
    assert np.all(out.features >= t.features.min(axis=0) - 1e-9)
    validate(out)


@settings(max_examples=150, deadline=None)
@given(merge_instances())
def test_size_weighted_conserves_mass(inst):
    n, gamma, r, seed = inst
    t, keys = random_tokens(n, seed)
    out = merge_step(t, keys, MergeConfig(gamma, r, "size_weighted", "naive"), partition_uniform(n, gamma).target_idx)
    before = (t.sizes[:, None] * t.features).sum(axis=0)
    after = (out.sizes[:, None] * out.features).sum(axis=0)
    np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose((out.sizes * out.motion).sum(), (t.sizes * t.motion).sum(), rtol=1e-9)


@settings(max_examples=100, deadline=None)
@given(merge_instances())
def test_constituents_partition_the_input(inst):
    n, gamma, r, seed = inst
    _, keys = random_tokens(n, seed)
    part = partition_uniform(n, gamma)
    m = limit_matches(match_sources(keys, part), MergeConfig(gamma, r).merged_count(len(part.source_idx)))
    plan = plan_merge(part, m)
    groups = plan.constituents()
    assert sorted(i for g in groups for i in g) == list(range(n))
    assert all(g[0] == rep or rep in g for g, rep in zip(groups, plan.representative))
    t, _ = random_tokens(n, seed)
    assert apply_plan(t, plan, "average").n == plan.n_out
