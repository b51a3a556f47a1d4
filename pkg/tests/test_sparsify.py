"""Scoring and selection: hand-evaluated examples, loop oracles, and invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenprune import (
    PruneConfig, Tensor, build_mask, cls_row_scores, column_sum_scores, compact,
    head_softmax_scores, plan, scatter_back, select_mass, select_value,
)
from tokenprune.errors import ContractError, DistributionError


def random_probs(seed, heads, tokens):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(heads, tokens, tokens))
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# -- column-sum scores (primary importance) ------------------------------------


def test_column_sum_uniform_attention():
    probs = np.full((1, 4, 4), 0.25)
    out = column_sum_scores(probs)
    np.testing.assert_allclose(out.scores, [1 / 3] * 3, rtol=1e-12)
    assert out.kind == "column_sum"


def test_column_sum_hand_example():
    # every row [0.2, 0.5, 0.3]: patch-column sums (1.5, 0.9) -> [0.625, 0.375]
    probs = np.tile(np.array([0.2, 0.5, 0.3]), (1, 3, 1))
    out = column_sum_scores(probs)
    np.testing.assert_allclose(out.scores, [0.625, 0.375], rtol=1e-12)


def _column_sum_loop(probs):
    h_count, t, _ = probs.shape
    n = t - 1
    w = np.zeros(n)
    for col in range(n):
        for h in range(h_count):
            for row in range(t):
                w[col] += probs[h, row, col + 1]
    return w / w.sum()


def test_column_sum_two_heads_vs_loop_oracle():
    probs = random_probs(11, heads=2, tokens=6)
    # make head 2 structurally different from head 1
    probs[1] = probs[1, ::-1]
    out = column_sum_scores(probs)
    np.testing.assert_allclose(out.scores, _column_sum_loop(probs), rtol=1e-10)


def test_column_sum_batched_matches_per_sample():
    batch = np.stack([random_probs(s, 2, 5) for s in range(3)])
    out = column_sum_scores(batch)
    for b in range(3):
        np.testing.assert_allclose(out.scores[b], column_sum_scores(batch[b]).scores, rtol=1e-12)


def test_column_sum_rejects_zero_mass():
    with pytest.raises(DistributionError):
        column_sum_scores(np.zeros((1, 3, 3)))


# -- head-softmax scores (distillation distribution) -----------------------------


def test_head_softmax_uniform():
    probs = np.full((1, 4, 4), 0.25)
    out = head_softmax_scores(probs)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-7)


def test_head_softmax_closed_form():
    probs = np.tile(np.array([0.2, 0.5, 0.3]), (1, 3, 1))
    out = head_softmax_scores(probs)  # softmax of column sums (1.5, 0.9)
    e = np.exp([1.5, 0.9] - np.max([1.5, 0.9]))
    np.testing.assert_allclose(out.data, e / e.sum(), rtol=1e-6)
    np.testing.assert_allclose(out.data, [0.6457, 0.3543], atol=1e-4)


def _head_softmax_loop(probs):
    h_count, t, _ = probs.shape
    n = t - 1
    acc = np.zeros(n)
    for h in range(h_count):
        col = np.zeros(n)
        for colidx in range(n):
            for row in range(t):
                col[colidx] += probs[h, row, colidx + 1]
        e = np.exp(col - col.max())
        acc += e / e.sum()
    return acc / h_count


def test_head_softmax_two_heads_vs_loop_oracle():
    probs = random_probs(21, heads=2, tokens=6).astype(np.float64)
    out = head_softmax_scores(probs)
    np.testing.assert_allclose(out.data, _head_softmax_loop(probs), rtol=1e-9)


def test_head_softmax_gradient_flows():
    probs = Tensor(random_probs(3, 2, 5).astype(np.float64), requires_grad=True)
    out = head_softmax_scores(probs)
    out.sum().backward()
    assert probs.grad is not None


# -- CLS-row scores ---------------------------------------------------------------


def test_cls_row_uniform():
    probs = np.full((2, 4, 4), 0.25)
    out = cls_row_scores(probs)
    np.testing.assert_allclose(out.scores, [1 / 3] * 3, rtol=1e-12)
    assert out.kind == "cls_row"


def test_cls_row_hand_example():
    probs = np.zeros((1, 3, 3))
    probs[0, 0] = [0.4, 0.36, 0.24]  # CLS row: self 0.4, patches 0.36/0.24
    probs[0, 1] = [1 / 3] * 3
    probs[0, 2] = [1 / 3] * 3
    out = cls_row_scores(probs)
    np.testing.assert_allclose(out.scores, [0.6, 0.4], rtol=1e-12)


def test_cls_row_equals_column_sum_when_rows_identical():
    row = np.array([0.1, 0.5, 0.25, 0.15])
    probs = np.tile(row, (2, 4, 1))
    np.testing.assert_allclose(
        cls_row_scores(probs).scores, column_sum_scores(probs).scores, rtol=1e-12
    )


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_scores_are_distributions(seed):
    probs = random_probs(seed, heads=3, tokens=7)
    for scores in (
        column_sum_scores(probs).scores,
        head_softmax_scores(probs).data,
        cls_row_scores(probs).scores,
    ):
        assert scores.min() >= 0
        np.testing.assert_allclose(scores.sum(), 1.0, atol=1e-6)


# -- value selector -----------------------------------------------------------------


def test_select_value_k_rule_n196():
    scores = np.random.default_rng(0).random(196)
    sel = select_value(scores, 0.5)
    assert sel.size == 99  # round-half-up(0.5 * 197)


def test_select_value_density_one_clamps_to_all():
    scores = np.random.default_rng(1).random(196)
    sel = select_value(scores, 1.0)
    np.testing.assert_array_equal(sel, np.arange(196))


def test_select_value_tie_broken_by_lower_index():
    sel = select_value(np.array([0.5, 0.2, 0.2, 0.1]), 2 / 5)  # K = 2
    np.testing.assert_array_equal(sel, [0, 1])


def test_select_value_minimum_one():
    sel = select_value(np.array([0.9, 0.1]), 0.0)
    np.testing.assert_array_equal(sel, [0])


# -- mass selector ------------------------------------------------------------------


def test_select_mass_forced_examples():
    scores = np.array([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(select_mass(scores, 0.7), [0, 1])
    np.testing.assert_array_equal(select_mass(scores, 0.5), [0])


def test_select_mass_threshold_one_keeps_all():
    scores = np.array([0.7, 0.3, 0.0])
    np.testing.assert_array_equal(select_mass(scores, 1.0), [0, 1, 2])


def _mass_oracle(scores, threshold):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    total = 0.0
    chosen = []
    for i in order:
        chosen.append(i)
        total += float(scores[i])
        if total >= threshold:
            break
    return sorted(chosen)


def test_select_mass_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(300):
        n = int(rng.integers(1, 64))
        raw = rng.random(n)
        scores = raw / raw.sum()
        th = float(rng.uniform(0.05, 0.999))
        np.testing.assert_array_equal(select_mass(scores, th), _mass_oracle(scores, th))


@given(
    arrays(np.float64, st.integers(1, 32), elements=st.floats(0.0, 1.0)),
    st.floats(0.05, 0.999),
)
@settings(max_examples=100, deadline=None)
def test_select_mass_minimality_property(raw, threshold):
    total = raw.sum()
    if total <= 0:
        return
    scores = raw / total
    sel = select_mass(scores, threshold)
    picked = scores[sel]
    assert picked.sum() >= threshold or sel.size == scores.size
    if sel.size > 0 and picked.sum() >= threshold:
        assert picked.sum() - picked.min() < threshold


@given(
    arrays(np.float64, st.integers(2, 32), elements=st.floats(0.001, 1.0)),
    st.floats(0.05, 0.95),
    st.floats(0.0, 0.04),
)
@settings(max_examples=100, deadline=None)
def test_select_mass_monotone_in_threshold(raw, th, bump):
    scores = raw / raw.sum()
    lo = set(select_mass(scores, th).tolist())
    hi = set(select_mass(scores, th + bump).tolist())
    assert lo <= hi


# -- masks and compaction --------------------------------------------------------------


def test_build_mask_example():
    mask = build_mask(np.array([1, 3]), num_patches=4)
    np.testing.assert_array_equal(mask.bits, [1, 0, 1, 0, 1])
    assert mask.kept_count == 3
    assert mask.density == 3 / 5


def test_build_mask_all():
    mask = build_mask(np.arange(4), 4)
    np.testing.assert_array_equal(mask.bits, np.ones(5))


def test_build_mask_rejects_empty_and_out_of_range():
    with pytest.raises(ContractError):
        build_mask(np.array([], dtype=int), 4)
    with pytest.raises(IndexError):
        build_mask(np.array([4]), 4)


def test_compact_identity_and_gather():
    x = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    full, idx = compact(Tensor(x), np.array([1, 1, 1]))
    np.testing.assert_array_equal(full.data, x)
    np.testing.assert_array_equal(idx, [0, 1, 2])
    picked, idx = compact(Tensor(x), np.array([1, 0, 1]))
    np.testing.assert_array_equal(picked.data, x[:, [0, 2]])
    np.testing.assert_array_equal(idx, [0, 2])


def test_compact_scatter_roundtrip():
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    mask = np.array([1, 0, 1])
    picked, idx = compact(Tensor(x), mask)
    restored = scatter_back(picked.data, idx, 3)
    np.testing.assert_array_equal(restored[:, [0, 2]], x[:, [0, 2]])
    np.testing.assert_array_equal(restored[:, 1], 0.0)


# -- plan -------------------------------------------------------------------------------


def test_plan_none_strategy_keeps_everything():
    probs = np.stack([random_probs(s, 2, 5) for s in range(4)])
    masks, densities = plan(probs, PruneConfig(strategy="none"))
    np.testing.assert_array_equal(masks, 1)
    np.testing.assert_array_equal(densities, 1.0)


def _probs_with_scores(scores):
    """Attention whose every row equals [tiny CLS, scores...]; column sums then
    mirror the requested score profile."""
    row = np.concatenate([[1e-6], scores])
    row = row / row.sum()
    return np.tile(row, (1, row.size, 1))


def test_plan_mass_concentrated_needs_fewer_tokens():
    concentrated = _probs_with_scores(np.array([0.9, 0.05, 0.03, 0.02]))
    flat = _probs_with_scores(np.full(4, 0.25))
    batch = np.stack([concentrated, flat])
    cfg = PruneConfig(strategy="mass", mass_threshold=0.7)
    masks, densities = plan(batch, cfg)
    assert masks[0].sum() < masks[1].sum()
    assert densities[0] < densities[1]


def test_plan_value_density_042_n196():
    probs = random_probs(5, 6, 197)
    cfg = PruneConfig(strategy="value", density=0.42)
    mask, density = plan(probs, cfg)
    assert mask.shape == (197,)
    assert mask.sum() == 1 + 83  # CLS + round(0.42 * 197)
    np.testing.assert_allclose(density, 84 / 197, rtol=1e-12)
    np.testing.assert_allclose(density, 0.42, atol=0.01)


def test_plan_matches_selector_oracle():
    probs = np.stack([random_probs(s, 2, 9) for s in range(5)])
    cfg = PruneConfig(strategy="mass", mass_threshold=0.6)
    masks, _ = plan(probs, cfg)
    for b in range(5):
        scores = column_sum_scores(probs[b]).scores
        expected = build_mask(select_mass(scores, 0.6), 8).bits
        np.testing.assert_array_equal(masks[b], expected)


def test_prune_config_validation():
    with pytest.raises(ContractError):
        PruneConfig(strategy="value")  # missing density
    with pytest.raises(ContractError):
        PruneConfig(strategy="mass")  # missing threshold
    with pytest.raises(ContractError):
        PruneConfig(strategy="mass", mass_threshold=0.0)
    with pytest.raises(ContractError):
        PruneConfig(strategy="sparse")
