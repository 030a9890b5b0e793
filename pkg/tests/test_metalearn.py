import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffcsn import numcore as nc
from ffcsn.metalearn import (
    ComparisonNet,
    MetaTask,
    build_meta_task,
    compare,
    loss_contrastive,
    loss_ml,
    loss_triplet,
    pair_concat,
    pairwise_loss,
    task_pairs,
)

T, D = 0, 1


def rng(seed=0):
    return np.random.default_rng(seed)


def small_g(seed=0, depth=4):
    return ComparisonNet(depth, 3, rng(seed), channels=(4, 3), init="fan_in", dtype="float64")


# -- meta tasks ------------------------------------------------------------------

def test_deceptive_anchor_among_truthful_partners():
    labels = np.array([D, T, T, D, T, T])
    for seed in range(200):
        task = build_meta_task(labels, 5, rng(seed))
        if task.anchor == 0:
            break
    order = np.argsort(task.train_indices)
    assert np.array_equal(np.array(task.train_indices)[order], [1, 2, 3, 4, 5])
    assert task.targets[order].tolist() == [0, 0, 1, 0, 0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=12), st.integers(0, 10**6))
def test_meta_task_invariants(labels, seed):
    P = len(labels) - 1
    task = build_meta_task(labels, P, rng(seed))
    assert task.anchor not in task.train_indices
    assert len(set(task.train_indices)) == P
    lab = np.asarray(labels)
    assert np.array_equal(task.targets, (lab[task.train_indices] == lab[task.anchor]).astype(float))


def test_all_same_class_targets_all_one():
    assert build_meta_task([1] * 6, 5, rng()).targets.tolist() == [1.0] * 5


def test_p_one_gives_single_pair():
    assert build_meta_task([0, 1, 1], 1, rng()).P == 1


def test_meta_task_deterministic_and_size_checked():
    a = build_meta_task([0, 1] * 6, 5, rng(3))
    b = build_meta_task([0, 1] * 6, 5, rng(3))
    assert (a.anchor, a.train_indices) == (b.anchor, b.train_indices)
    with pytest.raises(ValueError, match="too small"):
        build_meta_task([0, 1, 0], 3, rng())
    with pytest.raises(ValueError):
        build_meta_task([0, 1, 0], 0, rng())


# -- comparison network ------------------------------------------------------------

def test_pair_concat_doubles_depth():
    a = nc.tensor(np.ones((2, 3, 4, 4)))
    assert pair_concat(a, a).shape == (2, 6, 4, 4)
    with pytest.raises(nc.ShapeError):
        pair_concat(a, nc.tensor(np.ones((2, 2, 4, 4))))


def test_zero_fc_gives_half():
    g = small_g()
    for p in list(g.fc1.parameters()) + list(g.fc2.parameters()):
        p.data[...] = 0.0
    r = compare(g, nc.tensor(rng().standard_normal((3, 4, 3, 3))))
    assert np.allclose(r.data, 0.5)


def test_scores_in_open_unit_interval():
    r = compare(small_g(), nc.tensor(5 * rng(1).standard_normal((6, 4, 3, 3))))
    assert r.shape == (6,) and np.all((r.data > 0) & (r.data < 1))


def test_comparison_net_grad_check():
    g = small_g(2)
    pairs = nc.tensor(rng(3).standard_normal((4, 4, 3, 3)))
    task = MetaTask(0, [1, 2, 3, 4], np.array([1.0, 0.0, 0.0, 1.0]))
    res = nc.check_gradients(lambda: loss_ml(task, g(pairs)), list(g.named_parameters()), 1e-5)
    assert res.max_relative_error <= 1e-4


def test_task_pairs_stacks_anchor_with_partners():
    maps = nc.tensor(rng().standard_normal((4, 2, 3, 3)))
    task = MetaTask(2, [0, 3], np.array([0.0, 1.0]))
    pairs = task_pairs(maps, task)
    assert pairs.shape == (2, 4, 3, 3)
    assert np.array_equal(pairs.data[1, :2], maps.data[2]) and np.array_equal(pairs.data[1, 2:], maps.data[3])


# -- losses ------------------------------------------------------------------------

def task_with(targets):
    return MetaTask(0, list(range(1, len(targets) + 1)), np.asarray(targets, dtype=float))


def test_loss_ml_all_correct_at_point_nine():
    task = task_with([1, 0, 1, 0, 0])
    scores = nc.tensor(np.where(task.targets == 1, 0.9, 0.1))
    assert abs(float(loss_ml(task, scores).data) - (-math.log(0.9))) <= 1e-6


def test_loss_ml_half_is_ln2():
    task = task_with([1, 0, 1])
    assert abs(float(loss_ml(task, nc.tensor(np.full(3, 0.5))).data) - math.log(2)) <= 1e-6


def test_loss_ml_limit_and_shape_check():
    task = task_with([1, 1])
    assert float(loss_ml(task, nc.tensor([1 - 1e-12, 1 - 1e-12])).data) < 1e-6
    with pytest.raises(nc.ShapeError):
        loss_ml(task, nc.tensor([0.5, 0.5, 0.5]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=9), st.integers(0, 10**6))
def test_loss_ml_non_negative_and_relabel_invariant(labels, seed):
    labels = np.asarray(labels)
    P = len(labels) - 1
    scores = nc.tensor(rng(seed + 1).uniform(1e-3, 1 - 1e-3, P))
    a = build_meta_task(labels, P, rng(seed))
    b = build_meta_task(1 - labels, P, rng(seed))
    la, lb = float(loss_ml(a, scores).data), float(loss_ml(b, scores).data)
    assert la >= 0 and la == lb


def test_contrastive_oracles():
    f = nc.tensor(np.ones((1, 4)))
    assert float(loss_contrastive(f, f, [1]).data) == pytest.approx(0.0, abs=1e-12)
    far = nc.tensor(np.array([[3.0, 0, 0, 0]]))
    assert float(loss_contrastive(nc.tensor(np.zeros((1, 4))), far, [0], margin=1.0).data) == 0.0
    half = nc.tensor(np.array([[0.5, 0, 0, 0]]))
    assert float(loss_contrastive(nc.tensor(np.zeros((1, 4))), half, [0], margin=1.0).data) == pytest.approx(0.25)


def test_triplet_oracles():
    a = nc.tensor(np.zeros((1, 2)))
    assert float(loss_triplet(a, a, nc.tensor([[2.0, 0.0]]), 1.0).data) == pytest.approx(0.0, abs=1e-5)
    p = nc.tensor([[1.0, 0.0]])
    assert float(loss_triplet(a, p, nc.tensor([[0.0, 1.0]]), 0.7).data) == pytest.approx(0.7)
    assert float(loss_triplet(a, nc.tensor([[1.5, 0.0]]), nc.tensor([[0.0, 1.0]]), 0.5).data) == pytest.approx(1.0)


def test_margins_must_be_positive():
    f = nc.tensor(np.ones((1, 2)))
    with pytest.raises(ValueError):
        loss_contrastive(f, f, [1], margin=0)
    with pytest.raises(ValueError):
        loss_triplet(f, f, f, margin=-1)


def test_pairwise_losses_grad_check():
    r = rng(5)
    feats = nc.Parameter(r.standard_normal((6, 5)), name="features")
    task = MetaTask(0, [1, 2, 3, 4], np.array([1.0, 0.0, 1.0, 0.0]))
    for kind in ("siamese", "triplet"):
        res = nc.check_gradients(lambda: pairwise_loss(kind, None, None, feats, task, margin=5.0),
                                 [("features", feats)], 1e-5)
        assert res.max_relative_error <= 1e-4, kind


def test_pairwise_loss_dispatch():
    feats = nc.tensor(rng().standard_normal((4, 3)))
    assert pairwise_loss("none", None, None, feats, task_with([1, 0, 1])) is None
    assert pairwise_loss("triplet", None, None, feats, task_with([1, 1, 1])) is None
    with pytest.raises(ValueError, match="unknown"):
        pairwise_loss("cosine", None, None, feats, task_with([1]))
