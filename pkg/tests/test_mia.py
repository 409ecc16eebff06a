import numpy as np
import pytest

from fedunlearn.data import DatasetMeta, LabeledSet
from fedunlearn.errors import ContractError
from fedunlearn.federation import local_train
from fedunlearn.mia import (
    MiaSplits, balanced_accuracy_of, evaluate_unlearning, extract_features, fit_attack,
    shuffled_label_baseline, train_attack,
)
from fedunlearn.nn import build_mlp
from fedunlearn.tensor import SgdConfig

from oracles import softmax_row


def _gauss(n, rng, d=20, k=4):
    y = rng.integers(0, k, n)
    return LabeledSet(np.eye(k, d)[y] + rng.standard_normal((n, d)), y, DatasetMeta(k, (d,), "gauss"))


@pytest.fixture(scope="module")
def overfit():
    """An MLP that memorizes 50 noisy samples and generalizes poorly."""
    rng = np.random.default_rng(0)
    members, out_a, out_b = _gauss(50, rng), _gauss(200, rng), _gauss(200, rng)
    model, stats = local_train(build_mlp(20, [128], 4, seed=0), members, 200, 10, SgdConfig(0.05, 0.9), seed=0)
    assert stats["train_acc"] == 1.0
    return model, members, out_a, out_b


def test_uniform_logits_give_uniform_features():
    m = build_mlp(3, [], 5, seed=0)
    for p in m.params.values():
        p.data[...] = 0.0
    data = _gauss(7, np.random.default_rng(1), d=3, k=5)
    assert np.allclose(extract_features(m, data), np.full((7, 5), 0.2), atol=1e-15)


def test_features_sorted_rows_sum_to_one():
    m = build_mlp(4, [6], 3, seed=2)
    data = _gauss(30, np.random.default_rng(3), d=4, k=3)
    f = extract_features(m, data)
    assert np.all(np.diff(f, axis=1) <= 0)
    assert np.allclose(f.sum(axis=1), 1.0, atol=1e-12)
    ref = np.array([sorted(softmax_row(r), reverse=True) for r in m.logits(data.features)])
    assert np.allclose(f, ref, atol=1e-12)


def test_extract_features_read_only():
    m = build_mlp(4, [6], 3, seed=2)
    before = {k: p.data.tobytes() for k, p in m.params.items()}
    extract_features(m, _gauss(10, np.random.default_rng(0), d=4, k=3))
    assert before == {k: p.data.tobytes() for k, p in m.params.items()}


def test_overfit_model_attack_train_accuracy(overfit):
    model, members, out_a, _ = overfit
    q = train_attack(model, MiaSplits(members, out_a), seed=0)
    assert q.train_accuracy >= 0.7


def test_overfit_model_is_exposed(overfit):
    model, members, out_a, out_b = overfit
    q = train_attack(model, MiaSplits(members, out_a), seed=0)
    assert evaluate_unlearning(q, model, members, out_b, seed=0).mia_accuracy > 0.6


def test_identical_outputs_score_half(overfit):
    # a model whose output ignores its input leaks nothing about membership
    _, members, out_a, out_b = overfit
    flat = build_mlp(20, [], 4, seed=0)
    flat.params["fc1.weight"].data[...] = 0.0
    q = train_attack(flat, MiaSplits(members, out_a), seed=0)
    v = evaluate_unlearning(q, flat, members, out_b, seed=0)
    assert v.mia_accuracy == 0.5


def test_forget_equals_nonmember_is_exactly_half(overfit):
    model, members, out_a, _ = overfit
    q = train_attack(model, MiaSplits(members, out_a), seed=0)
    v = evaluate_unlearning(q, model, members, members, seed=0)
    assert v.mia_accuracy == 0.5
    assert v.member_rate_on_forget == v.member_rate_on_nonmember


def test_same_seed_same_attack(overfit):
    model, members, out_a, _ = overfit
    a = train_attack(model, MiaSplits(members, out_a), seed=4)
    b = train_attack(model, MiaSplits(members, out_a), seed=4)
    assert a.weight.tobytes() == b.weight.tobytes() and a.bias == b.bias


@pytest.mark.parametrize("seed", range(5))
def test_shuffled_labels_no_signal(seed):
    rng = np.random.default_rng(seed)
    members, nonmembers = _gauss(400, rng), _gauss(400, rng)
    model, _ = local_train(build_mlp(20, [64], 4, seed=seed), members, 30, 10, SgdConfig(0.05, 0.9), seed=seed)
    v = shuffled_label_baseline(extract_features(model, members), extract_features(model, nonmembers), seed=seed)
    assert 0.4 <= v.mia_accuracy <= 0.6


def test_balanced_evaluation_sizes(overfit):
    model, members, out_a, out_b = overfit
    q = train_attack(model, MiaSplits(members, out_a), seed=0)
    v = evaluate_unlearning(q, model, members.subset(range(12)), out_b, seed=0)
    assert v.n_forget == v.n_nonmember == 12
    small = evaluate_unlearning(q, model, members, out_b.subset(range(5)), seed=0)
    assert small.n_nonmember == 50


def test_accuracy_bounds_and_perfect_attack():
    q = fit_attack(np.tile([0.9, 0.1], (20, 1)), np.tile([0.5, 0.5], (20, 1)), epochs=50)
    v = balanced_accuracy_of(q, np.tile([0.9, 0.1], (5, 1)), np.tile([0.5, 0.5], (5, 1)))
    assert v.mia_accuracy == 1.0


def test_too_few_samples(overfit):
    model, members, out_a, _ = overfit
    with pytest.raises(ContractError):
        train_attack(model, MiaSplits(members.subset(range(9)), out_a))
    with pytest.raises(ContractError):
        evaluate_unlearning(fit_attack(np.ones((3, 4)), np.zeros((3, 4)), epochs=1), model,
                            members.subset([]), out_a)
