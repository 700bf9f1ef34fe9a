from collections import Counter

import numpy as np
import pytest

from cgsta.augment import (AugmentConfig, augment_batch, cluster_drift, context_replace,
                           contiguous_groups, make_pseudo_anomaly, point_inject, replace_length)


def test_single_cell_point_injection():
    cfg = AugmentConfig(point_fraction=0.01, point_magnitude=3.0)
    out = point_inject(np.zeros((2, 4)), np.random.default_rng(0), cfg, std=np.ones(2))
    diff = out - np.zeros((2, 4))
    assert np.count_nonzero(diff) == 1
    assert np.abs(diff).max() == 3.0


def test_point_count_and_determinism():
    w = np.random.default_rng(1).standard_normal((6, 50))
    cfg = AugmentConfig(point_fraction=0.1)
    a = point_inject(w, np.random.default_rng(5), cfg)
    b = point_inject(w, np.random.default_rng(5), cfg)
    assert np.count_nonzero(a != w) == 30
    assert np.array_equal(a, b)


def test_context_replace_preserves_row_multiset():
    w = np.vstack([np.arange(1.0, 9.0), np.arange(10.0, 18.0)])
    cfg = AugmentConfig(replace_len_fraction=0.25)
    assert replace_length(8, cfg) == 2
    for seed in range(20):
        out = context_replace(w, np.random.default_rng(seed), cfg)
        changed = np.flatnonzero((out != w).any(axis=1))
        assert changed.size == 1
        k = changed[0]
        assert sorted(out[k]) == sorted(w[k])
        assert np.array_equal(np.delete(out, k, axis=0), np.delete(w, k, axis=0))


def test_context_replace_needs_l4():
    with pytest.raises(ValueError):
        context_replace(np.ones((2, 3)), np.random.default_rng(0), AugmentConfig())


def test_cluster_drift_touches_one_group_trailing_half():
    w = np.random.default_rng(2).standard_normal((4, 10))
    groups = np.array([0, 0, 1, 1])
    cfg = AugmentConfig(drift_magnitude=1.5)
    for seed in range(10):
        out = cluster_drift(w, groups, np.random.default_rng(seed), cfg)
        rows = np.flatnonzero((out != w).any(axis=1))
        assert rows.tolist() in ([0, 1], [2, 3])
        assert not (out[rows, :5] != w[rows, :5]).any()
        assert (out[rows, 5:] != w[rows, 5:]).all()
        delta = (out - w)[rows, 5:]
        std = w[rows].std(axis=1)
        np.testing.assert_allclose(np.abs(delta), np.repeat(1.5 * std[:, None], 5, axis=1), rtol=1e-12)


def test_drift_on_flat_row_still_moves():
    w = np.zeros((2, 8))
    out = cluster_drift(w, [0, 0], np.random.default_rng(0), AugmentConfig())
    assert (out[:, 4:] != 0).all()


def test_single_group_partition_is_valid():
    w = np.random.default_rng(0).standard_normal((3, 8))
    out = cluster_drift(w, [0, 0, 0], np.random.default_rng(0), AugmentConfig())
    assert (out[:, 4:] != w[:, 4:]).all()


def test_degenerate_weights_pick_point():
    cfg = AugmentConfig(strategy_weights=(1.0, 0.0, 0.0))
    rng = np.random.default_rng(0)
    w = np.random.default_rng(1).standard_normal((4, 12))
    tags = {make_pseudo_anomaly(w, [0, 0, 1, 1], rng, cfg)[1] for _ in range(50)}
    assert tags == {"point"}


def test_every_view_differs_and_frequencies_match_weights():
    rng = np.random.default_rng(3)
    w = np.random.default_rng(4).standard_normal((4, 12))
    windows = np.broadcast_to(w, (10000, 4, 12)).copy()
    out, tags = augment_batch(windows, contiguous_groups(4, 2), rng, AugmentConfig())
    assert (out != windows).reshape(10000, -1).any(axis=1).all()
    freq = Counter(tags)
    for tag in ("point", "context", "drift"):
        assert abs(freq[tag] / 10000 - 1 / 3) < 0.02


def test_input_never_mutated():
    w = np.random.default_rng(0).standard_normal((4, 12))
    keep = w.copy()
    make_pseudo_anomaly(w, [0, 0, 1, 1], np.random.default_rng(0), AugmentConfig())
    assert np.array_equal(w, keep)


@pytest.mark.parametrize("kw", [dict(point_fraction=0.0), dict(replace_len_fraction=1.0),
                                dict(point_magnitude=-1.0), dict(strategy_weights=(0.5, 0.5, 0.5))])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        AugmentConfig(**kw)


def test_contiguous_groups():
    assert contiguous_groups(6, 3).tolist() == [0, 0, 1, 1, 2, 2]
    assert contiguous_groups(3, 5).tolist() == [0, 1, 2]
