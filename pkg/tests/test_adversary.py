import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmask.adversary import (AttackPlan, AttackSpec, TriggerPattern, apply_global_trigger,
                               corner_triggers, evaluate_asr, inject_backdoor, plan_attack,
                               poison_labels, select_malicious)
from fedmask.data import Dataset, generate_blobs
from fedmask.nn import LayerLayout, ParamVector, init_params, predict


def test_select_malicious_counts():
    assert len(select_malicious(10, 0.49, 0)) == 4
    assert len(select_malicious(10, 0.30, 0)) == 3
    assert select_malicious(10, 0.0, 0) == []


def test_select_malicious_is_sorted_and_seeded():
    a = select_malicious(20, 0.4, 3)
    assert a == sorted(a) == select_malicious(20, 0.4, 3)
    assert len(set(a)) == len(a) and all(0 <= i < 20 for i in a)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_majority_constraint(n, ratio, seed):
    assert len(select_malicious(n, ratio, seed)) <= (n - 1) / 2


def _data(n=50, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, 16)), rng.integers(0, classes, n), classes, (4, 4))


def test_poison_zero_fraction_is_identity():
    d = _data()
    out = poison_labels(d, 0.0, 1)
    assert out.labels.tobytes() == d.labels.tobytes()
    assert out.inputs.tobytes() == d.inputs.tobytes()


def test_poison_flips_exact_count():
    d = _data(10)
    out = poison_labels(d, 0.4, 2)
    changed = out.labels != d.labels
    assert changed.sum() == 4
    assert np.array_equal(out.inputs, d.inputs)
    assert out.labels.min() >= 0 and out.labels.max() < d.num_classes


def test_poison_deterministic():
    d = _data()
    assert np.array_equal(poison_labels(d, 0.3, 9).labels, poison_labels(d, 0.3, 9).labels)


def test_poison_needs_two_classes():
    d = Dataset(np.zeros((3, 1)), np.zeros(3, int), 1)
    with pytest.raises(ValueError):
        poison_labels(d, 0.5, 0)


def test_flip_targets_cover_other_classes():
    d = Dataset(np.zeros((3000, 1)), np.zeros(3000, int), 4)
    out = poison_labels(d, 1.0, 0)
    counts = np.bincount(out.labels, minlength=4)
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - 1000) < 120)


def test_backdoor_exact_count():
    d = _data(50)
    trig = corner_triggers((4, 4))[0]
    out = inject_backdoor(d, trig, 0.2, 0, seed=5)
    px = trig.flat_indices((4, 4))
    stamped = np.all(out.inputs[:, px] == 1.0, axis=1) & np.any(out.inputs != d.inputs, axis=1)
    assert stamped.sum() == 10
    assert np.all(out.labels[stamped] == 0)
    # untouched rows keep inputs and labels
    assert np.array_equal(out.inputs[~stamped], d.inputs[~stamped])
    assert np.array_equal(out.labels[~stamped], d.labels[~stamped])


def test_backdoor_zero_fraction():
    d = _data()
    out = inject_backdoor(d, corner_triggers((4, 4))[1], 0.0, 0, 1)
    assert out.inputs.tobytes() == d.inputs.tobytes()


def test_backdoor_idempotent_pixels():
    d = _data()
    trig = corner_triggers((4, 4))[2]
    once = inject_backdoor(d, trig, 1.0, 0, 3)
    twice = inject_backdoor(once, trig, 1.0, 0, 3)
    assert once.inputs.tobytes() == twice.inputs.tobytes()


def test_backdoor_out_of_bounds():
    with pytest.raises(ValueError):
        inject_backdoor(_data(), TriggerPattern(0, ((4, 0),)), 0.5, 0, 0)
    with pytest.raises(ValueError):
        inject_backdoor(_data(), corner_triggers((4, 4))[0], 0.5, 7, 0)


def test_corner_triggers_are_disjoint():
    trigs = corner_triggers((8, 8))
    pix = [set(t.pixel_coords) for t in trigs]
    assert all(len(p) == 4 for p in pix)
    assert len(set().union(*pix)) == 16


def test_global_trigger_touches_sixteen_pixels():
    x = np.full((3, 64), 0.25)
    out = apply_global_trigger(x, corner_triggers((8, 8)), (8, 8))
    assert np.all((out != x).sum(axis=1) == 16)
    again = apply_global_trigger(out, corner_triggers((8, 8)), (8, 8))
    assert again.tobytes() == out.tobytes()


def test_global_trigger_empty_list_is_identity():
    x = np.random.default_rng(0).random((4, 16))
    assert apply_global_trigger(x, [], (4, 4)).tobytes() == x.tobytes()


def _constant(layout, k):
    v = np.zeros(layout.total_params)
    _, bs = layout.layer_slices()[-1]
    v[bs.start + k] = 1.0
    return ParamVector(v, layout)


def test_asr_extremes():
    layout = LayerLayout.mlp(16, 4, 4)
    d = _data(40)
    trigs = corner_triggers((4, 4), 4, 1)
    assert evaluate_asr(_constant(layout, 0), d, trigs, 0) == 1.0
    assert evaluate_asr(_constant(layout, 2), d, trigs, 0) == 0.0


def test_asr_matches_counting_oracle():
    d = generate_blobs(4, 30, 16, 0.4, seed=2, image_shape=(4, 4))
    layout = LayerLayout.mlp(16, 8, 4)
    model = init_params(layout, np.random.default_rng(1))
    trigs = corner_triggers((4, 4), 4, 1)
    hits = total = 0
    for x, y in zip(d.inputs, d.labels):
        if y == 1:
            continue
        x = x.copy()
        for t in trigs:
            for r, c in t.pixel_coords:
                x[r * 4 + c] = t.value
        total += 1
        hits += int(predict(model, Dataset(x[None, :], np.array([y]), 4))[0] == 1)
    assert evaluate_asr(model, d, trigs, 1) == hits / total


def test_asr_ignores_sample_order():
    d = generate_blobs(3, 20, 16, 0.4, seed=4, image_shape=(4, 4))
    model = init_params(LayerLayout.mlp(16, 8, 3), np.random.default_rng(2))
    trigs = corner_triggers((4, 4), 4, 1)
    perm = np.random.default_rng(0).permutation(len(d))
    assert evaluate_asr(model, d, trigs, 0) == evaluate_asr(model, d.subset(perm), trigs, 0)


def test_asr_rejects_all_target_set():
    d = Dataset(np.zeros((5, 16)), np.zeros(5, int), 2, (4, 4))
    with pytest.raises(ValueError):
        evaluate_asr(_constant(LayerLayout.mlp(16, 2, 2), 0), d, [], 0)


def test_plan_maps_triggers_round_robin():
    spec = AttackSpec("dba", malicious_ratio=0.49, poisoned_data_ratio=0.2, seed=0)
    plan = plan_attack(spec, 11, (8, 8))
    assert len(plan.malicious) == 5
    ids = [plan.trigger_for(c).pattern_id for c in plan.malicious]
    assert ids == [0, 1, 2, 3, 0]


def test_plan_leaves_benign_clients_alone():
    spec = AttackSpec("convergence_prevention", malicious_ratio=0.3, poisoned_data_ratio=0.4)
    plan = plan_attack(spec, 10)
    benign = next(i for i in range(10) if i not in plan.malicious)
    d = _data()
    assert plan.poison(benign, d) is d
    assert (plan.poison(plan.malicious[0], d).labels != d.labels).sum() == 20


def test_none_plan_is_empty():
    plan = plan_attack(AttackSpec(), 10)
    assert isinstance(plan, AttackPlan) and plan.malicious == []


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(kind="replace")
    with pytest.raises(ValueError):
        AttackSpec(malicious_ratio=1.5)
    with pytest.raises(ValueError):
        plan_attack(AttackSpec("dba", 0.3, 0.2), 10, None)
