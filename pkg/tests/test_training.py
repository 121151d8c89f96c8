"""Cloud-stage tests: pretraining, task map, assignment program, fine-tuning."""

import numpy as np
import pytest

from eclm.data import Dataset
from eclm.errors import ConfigError, DataError
from eclm.modular import ModelShape, make_model_selector, modularize
from eclm.rng import stream
from eclm.selector import select
from eclm.training import (
    AssignmentMask,
    PretrainConfig,
    SubTask,
    TaskMapMatrix,
    annotate_subtasks,
    build_target_mapping,
    build_task_map,
    finetune_enhance,
    label_subtask_lookup,
    make_subtasks,
    pretrain,
    solve_assignment,
    validate_subtasks,
)
from eclm.nn import Tensor


def two_blob_data(seed=0, per_class=60):
    rng = stream(seed, "blob2")
    means = np.array([[2.0] * 6, [-2.0] * 6])
    xs, ys = [], []
    for c in range(2):
        xs.append(means[c] + 0.5 * rng.normal(size=(per_class, 6)))
        ys.append(np.full(per_class, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], y[order].copy())


def tiny_pair(seed=0, n=4, k=2, classes=2, input_dim=6):
    shape = ModelShape(
        input_dim=input_dim, num_classes=classes, front_dims=(8,),
        num_module_layers=1, layer_width=8, layer_hidden=8,
        modules_per_layer=n,
    )
    return modularize(shape, seed), make_model_selector(shape, (8,), k, seed)


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_separable_blobs_reaches_high_accuracy():
    model, sel = tiny_pair()
    data = two_blob_data()
    cfg = PretrainConfig(epochs=200, lambda_balance=0.1, lr=0.01, batch_size=16)
    _, _, log = pretrain(model, sel, data, cfg, stream(0, "pre"))
    assert log[-1]["accuracy"] >= 0.99


def test_pretrain_rejects_empty_and_bad_labels():
    model, sel = tiny_pair()
    cfg = PretrainConfig(epochs=1)
    with pytest.raises(DataError):
        pretrain(model, sel, Dataset(np.zeros((0, 6)), np.zeros(0)), cfg, stream(0, "x"))
    bad = Dataset(np.zeros((4, 6)), np.array([0, 1, 2, 5]))
    with pytest.raises(DataError):
        pretrain(model, sel, bad, cfg, stream(0, "x"))


def test_pretrain_log_flags_nothing_on_short_balanced_run():
    model, sel = tiny_pair()
    cfg = PretrainConfig(epochs=2, lambda_balance=0.5, lr=0.001)
    _, _, log = pretrain(model, sel, two_blob_data(), cfg, stream(1, "pre"))
    assert {"epoch", "loss_ce", "loss_balance", "accuracy", "loads", "collapsed"} <= set(log[0])


# ---------------------------------------------------------------------------
# sub-tasks and the task map


def test_subtask_validation():
    with pytest.raises(ConfigError):
        validate_subtasks(make_subtasks([[0, 1]]), 2)
    with pytest.raises(ConfigError):
        validate_subtasks(make_subtasks([[0], [1]]), 3)  # class 2 uncovered
    validate_subtasks(make_subtasks([[0, 1], [2, 3]]), 4)


def test_label_lookup_first_covering_wins():
    subtasks = make_subtasks([[0, 1], [1, 2]])
    lookup = label_subtask_lookup(subtasks, 3)
    np.testing.assert_array_equal(lookup, [0, 0, 1])


def test_task_map_one_hot_routing():
    model, sel = tiny_pair(n=3, k=1)
    # head ignores input, always routes sub-task samples to module 0
    for h in sel.heads:
        h.w.data[:] = 0.0
        h.b.data[:] = [50.0, 0.0, 0.0]
    data = Dataset(np.random.default_rng(0).normal(size=(20, 6)),
                   np.zeros(20, dtype=int), np.zeros(20, dtype=int))
    data2 = Dataset(data.x, data.y, np.repeat([0, 1], 10))
    h = build_task_map(sel, data2)
    np.testing.assert_allclose(h.per_layer[0][0], [1.0, 0.0, 0.0], atol=1e-20)


def test_task_map_uniform_gates():
    model, sel = tiny_pair(n=4, k=2)
    for h in sel.heads:
        h.w.data[:] = 0.0
        h.b.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(12, 6))
    data = Dataset(x, np.zeros(12, dtype=int), np.repeat([0, 1, 2], 4))
    h = build_task_map(sel, data)
    np.testing.assert_allclose(h.per_layer[0], np.full((3, 4), 0.25), atol=1e-12)


def test_task_map_matches_groupby_oracle():
    model, sel = tiny_pair(n=5, k=2)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 6))
    tids = rng.integers(0, 3, size=30)
    tids[:3] = [0, 1, 2]  # every sub-task populated
    data = Dataset(x, np.zeros(30, dtype=int), tids)
    h = build_task_map(sel, data)
    gates = select(sel, Tensor(x), "eval").gates[0]
    for t in range(3):
        expected = gates[tids == t].mean(axis=0)
        expected = expected / expected.sum()
        np.testing.assert_allclose(h.per_layer[0][t], expected, atol=1e-12)


def test_task_map_requires_annotations_and_nonempty_groups():
    model, sel = tiny_pair()
    x = np.zeros((4, 6))
    with pytest.raises(DataError):
        build_task_map(sel, Dataset(x, np.zeros(4, dtype=int)))
    with pytest.raises(DataError):
        build_task_map(sel, Dataset(x, np.zeros(4, dtype=int), np.full(4, 2)))


def test_task_map_rows_stochastic_for_any_selector():
    model, sel = tiny_pair(n=6, k=3, seed=9)
    rng = np.random.default_rng(3)
    data = Dataset(rng.normal(size=(40, 6)), np.zeros(40, dtype=int),
                   rng.integers(0, 4, size=40) % 4)
    data.subtask_ids[:4] = [0, 1, 2, 3]
    h = build_task_map(sel, data)
    np.testing.assert_allclose(h.per_layer[0].sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# assignment program


def brute_force_assignment(h, k1, k2, cap_mode="count"):
    """Exhaustive oracle over row-feasible patterns, vectorized by numpy."""
    t_count, n_count = h.shape
    from itertools import combinations

    row_patterns = []
    for r in range(0, k2 + 1):
        for combo in combinations(range(n_count), r):
            pat = np.zeros(n_count, dtype=np.int8)
            pat[list(combo)] = 1
            row_patterns.append(pat)
    row_patterns = np.array(row_patterns)
    best = -1.0
    stack = [np.zeros((0, n_count), dtype=np.int8)]
    # depth-first cartesian product over rows with column-cap pruning
    def rec(rows, t):
        nonlocal best
        if t == t_count:
            m = np.array(rows)
            value = float(h[m.astype(bool)].sum())
            best = max(best, value)
            return
        for pat in row_patterns:
            partial = rows + [pat]
            cols = np.sum(partial, axis=0)
            if cap_mode == "count":
                if np.any(cols > k1):
                    continue
            else:
                used = sum(h[i] * p for i, p in enumerate(partial))
                if np.any(used > k1 + 1e-12):
                    continue
            rec(partial, t + 1)

    rec([], 0)
    return best


def tm(h):
    return TaskMapMatrix([h / h.sum(axis=1, keepdims=True)], (0, 1))


def test_assignment_diagonal_dominance():
    h = np.array([[0.9, 0.1], [0.2, 0.8]])
    mask = solve_assignment(TaskMapMatrix([h], (0, 1)), 1, 1)
    np.testing.assert_array_equal(mask.per_layer[0], np.eye(2, dtype=np.int8))
    assert mask.info[0]["objective"] == pytest.approx(1.7)


def test_assignment_unconstrained_takes_everything():
    rng = np.random.default_rng(4)
    h = rng.dirichlet(np.ones(4), size=3)
    mask = solve_assignment(TaskMapMatrix([h], (0, 1, 2)), kappa1=3, kappa2=4)
    np.testing.assert_array_equal(mask.per_layer[0], np.ones((3, 4), dtype=np.int8))
    assert mask.info[0]["objective"] == pytest.approx(h.sum())


@pytest.mark.parametrize("seed", range(12))
def test_assignment_exact_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    h = rng.dirichlet(np.ones(5), size=4)
    mask = solve_assignment(TaskMapMatrix([h], tuple(range(4))), 2, 2)
    expected = brute_force_assignment(h, 2, 2)
    assert mask.info[0]["objective"] == pytest.approx(expected, abs=0)


def test_assignment_weighted_cap_mode_exact():
    rng = np.random.default_rng(11)
    h = rng.dirichlet(np.ones(4), size=3)
    mask = solve_assignment(TaskMapMatrix([h], (0, 1, 2)), 0.45, 2, cap_mode="weighted")
    col_loads = (h * mask.per_layer[0]).sum(axis=0)
    assert np.all(col_loads <= 0.45 + 1e-9)
    expected = brute_force_assignment(h, 0.45, 2, cap_mode="weighted")
    assert mask.info[0]["objective"] == pytest.approx(expected, abs=1e-12)


def test_assignment_objective_monotone_in_caps():
    rng = np.random.default_rng(5)
    h = rng.dirichlet(np.ones(5), size=4)
    task = TaskMapMatrix([h], tuple(range(4)))
    base = solve_assignment(task, 1, 1).info[0]["objective"]
    wider1 = solve_assignment(task, 2, 1).info[0]["objective"]
    wider2 = solve_assignment(task, 1, 2).info[0]["objective"]
    assert wider1 >= base and wider2 >= base


def test_assignment_greedy_reports_bound():
    rng = np.random.default_rng(6)
    h = rng.dirichlet(np.ones(6), size=5)
    mask = solve_assignment(TaskMapMatrix([h], tuple(range(5))), 2, 2, method="greedy")
    info = mask.info[0]
    assert info["method"] == "greedy"
    assert info["upper_bound"] >= info["objective"] - 1e-12


def test_assignment_validates_inputs():
    h = np.array([[0.5, 0.5], [0.5, 0.5]])
    task = TaskMapMatrix([h], (0, 1))
    with pytest.raises(ConfigError):
        solve_assignment(task, 0, 1)
    with pytest.raises(ConfigError):
        solve_assignment(task, 1, 1, cap_mode="bogus")


# ---------------------------------------------------------------------------
# target mapping and fine-tuning


def test_target_mapping_rows_renormalized():
    h = np.array([[0.6, 0.3, 0.1], [0.1, 0.2, 0.7]])
    m = np.array([[1, 1, 0], [0, 0, 1]], dtype=np.int8)
    mask = AssignmentMask([m], 1, 2, "count")
    mapping = build_target_mapping(TaskMapMatrix([h], (0, 1)), mask)
    np.testing.assert_allclose(mapping.rows[0][0], [2 / 3, 1 / 3, 0.0])
    np.testing.assert_allclose(mapping.rows[0][1], [0.0, 0.0, 1.0])
    assert mapping.repairs == []


def test_target_mapping_repairs_empty_row():
    h = np.array([[0.6, 0.4], [0.5, 0.5]])
    m = np.zeros((2, 2), dtype=np.int8)
    m[0, 0] = 1
    mask = AssignmentMask([m], 1, 1, "count")
    mapping = build_target_mapping(TaskMapMatrix([h], (0, 1)), mask)
    assert (0, 1) in mapping.repairs
    assert mapping.rows[0][1].sum() == pytest.approx(1.0)
    # repaired pick is the row's best module, allowed to exceed kappa1 by 1
    assert mapping.masks[0][1, 0] == 1


def test_finetune_kl_starts_near_zero_when_mapping_matches_routing():
    model, sel = tiny_pair(n=4, k=2, classes=2)
    data = two_blob_data(per_class=40)
    cfg = PretrainConfig(epochs=30, lambda_balance=0.1, lr=0.01)
    pretrain(model, sel, data, cfg, stream(3, "pre"))
    h = build_task_map(sel, data)
    identity = AssignmentMask(
        [np.ones_like(h.per_layer[0], dtype=np.int8)], 4, 4, "count"
    )
    mapping = build_target_mapping(h, identity)
    acc_before = None
    _, _, log = finetune_enhance(
        model, sel, mapping, data, lam=0.5, epochs=5, rng=stream(3, "ft"), lr=0.001
    )
    assert log[0]["loss_kl"] < 0.05  # target equals current routing
    acc_before = log[0]["accuracy"]
    assert log[-2]["accuracy"] >= acc_before - 0.005


def test_finetune_identity_mapping_keeps_routing_drift_small():
    model, sel = tiny_pair(n=4, k=2, classes=2)
    data = two_blob_data(per_class=40)
    pretrain(model, sel, data, PretrainConfig(epochs=30, lambda_balance=0.1, lr=0.01),
             stream(4, "pre"))
    h_before = build_task_map(sel, data)
    identity = AssignmentMask(
        [np.ones_like(h_before.per_layer[0], dtype=np.int8)], 4, 4, "count"
    )
    mapping = build_target_mapping(h_before, identity)
    finetune_enhance(model, sel, mapping, data, lam=0.5, epochs=5,
                     rng=stream(4, "ft"), lr=0.001)
    h_after = build_task_map(sel, data)
    tv = 0.5 * np.abs(h_after.per_layer[0] - h_before.per_layer[0]).sum(axis=1)
    assert tv.max() < 0.1


def test_finetune_concentrates_mass_on_selected_modules():
    model, sel = tiny_pair(n=4, k=2, classes=4)
    rng = stream(5, "blob4")
    means = rng.normal(0, 3.0, size=(4, 6))
    xs, ys = [], []
    for c in range(4):
        xs.append(means[c] + 0.5 * rng.normal(size=(50, 6)))
        ys.append(np.full(50, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    data = Dataset(x, y, y.copy())
    pretrain(model, sel, data, PretrainConfig(epochs=40, lambda_balance=0.1, lr=0.01),
             stream(5, "pre"))
    h = build_task_map(sel, data)
    mask = solve_assignment(h, kappa1=2, kappa2=2)
    mapping = build_target_mapping(h, mask)
    _, _, log = finetune_enhance(model, sel, mapping, data, lam=1.0, epochs=30,
                                 rng=stream(5, "ft"), lr=0.01)
    alignment = np.array(log[-1]["subtask_alignment"])
    assert alignment.min() >= 0.8


def test_annotate_subtasks_assigns_by_class():
    data = Dataset(np.zeros((4, 2)), np.array([0, 1, 2, 3]))
    subtasks = make_subtasks([[0, 1], [2, 3]])
    out = annotate_subtasks(data, subtasks, 4)
    np.testing.assert_array_equal(out.subtask_ids, [0, 0, 1, 1])
