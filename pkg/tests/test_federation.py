import numpy as np
import pytest

from fedunlearn.data import ClientDataset, DatasetMeta, LabeledSet, split_forget, split_holdout, synth_blobs
from fedunlearn.errors import ArchMismatchError, ContractError
from fedunlearn.federation import (
    FederationConfig, evaluate_clients, fedavg, local_train, retrain_baseline, run_federation,
)
from fedunlearn.nn import build_lenet5, build_mlp, serialized_size
from fedunlearn.tensor import SgdConfig

from oracles import weighted_mean


def _scalar_model(v):
    m = build_mlp(1, [], 1 + 1, seed=0)
    for p in m.params.values():
        p.data = np.full(p.shape, float(v))
    return m


def _blob_clients(n=5, per=200, seed=0, classes=3):
    sets = synth_blobs(n, classes, 2, per, 0.0, seed=seed)
    clients = []
    for i, s in enumerate(sets):
        train, test = split_holdout(s, 0.25, seed=100 + i)
        clients.append(ClientDataset(i, train, test))
    return clients


def _mlp_builder(classes=3):
    return lambda seed: build_mlp(2, [16], classes, seed=seed)


# -- local_train ----------------------------------------------------------------------


def test_local_train_zero_epochs_is_identity():
    data = _blob_clients(1)[0].train
    m = build_mlp(2, [8], 3, seed=1)
    out, stats = local_train(m, data, 0, 16, SgdConfig(0.1), seed=0)
    assert all(out.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)
    assert stats["steps"] == 0


def test_local_train_separable_blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    data = LabeledSet(x, y, DatasetMeta(2, (2,), "sep"))
    out, stats = local_train(build_mlp(2, [8], 2, seed=0), data, 20, 16, SgdConfig(0.05), seed=1)
    assert out.accuracy(x, y) >= 0.95
    assert stats["train_acc"] >= 0.95


def test_local_train_deterministic():
    data = _blob_clients(1)[0].train
    m = build_mlp(2, [8], 3, seed=1)
    a, _ = local_train(m, data, 2, 16, SgdConfig(0.1, 0.9), seed=5)
    b, _ = local_train(m, data, 2, 16, SgdConfig(0.1, 0.9), seed=5)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in m.params)


def test_local_train_leaves_input_model_untouched():
    data = _blob_clients(1)[0].train
    m = build_mlp(2, [8], 3, seed=1)
    before = {k: p.data.copy() for k, p in m.params.items()}
    local_train(m, data, 1, 16, SgdConfig(0.1), seed=0)
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_local_train_empty_data():
    empty = _blob_clients(1)[0].train.subset([])
    with pytest.raises(ContractError):
        local_train(build_mlp(2, [4], 3), empty, 1, 8, SgdConfig(), 0)


# -- fedavg ----------------------------------------------------------------------------


def test_fedavg_identical_models_bit_exact():
    m = build_lenet5(10, seed=3)
    out = fedavg([m, m.copy(), m.copy()], [1.0, 2.0, 7.0])
    assert all(out.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)


def test_fedavg_plain_mean():
    out = fedavg([_scalar_model(1.0), _scalar_model(3.0)], [1.0, 1.0])
    assert np.all(out.params["fc1.weight"].data == 2.0)


def test_fedavg_weighted_mean():
    out = fedavg([_scalar_model(1.0), _scalar_model(3.0)], [1.0, 3.0])
    assert np.all(out.params["fc1.weight"].data == 2.5)


def test_fedavg_matches_weighted_oracle():
    rng = np.random.default_rng(0)
    models = [build_mlp(4, [6], 3, seed=s) for s in range(5)]
    w = rng.uniform(0.1, 5.0, 5)
    out = fedavg(models, w)
    for k in out.params:
        ref = weighted_mean([m.params[k].data for m in models], w)
        assert np.max(np.abs(out.params[k].data - ref)) <= 1e-12


def test_fedavg_uniform_equals_unweighted():
    models = [build_mlp(4, [6], 3, seed=s) for s in range(4)]
    a, b = fedavg(models), fedavg(models, [2.5] * 4)
    for k in a.params:
        assert np.max(np.abs(a.params[k].data - np.mean([m.params[k].data for m in models], axis=0))) <= 1e-12
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_fedavg_permutation_invariant_with_ids():
    models = [build_mlp(3, [4], 2, seed=s) for s in range(4)]
    w = [1.0, 2.0, 3.0, 4.0]
    ids = [10, 11, 12, 13]
    perm = [2, 0, 3, 1]
    a = fedavg(models, w, ids)
    b = fedavg([models[i] for i in perm], [w[i] for i in perm], [ids[i] for i in perm])
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_fedavg_errors():
    with pytest.raises(ArchMismatchError):
        fedavg([build_mlp(2, [3], 2), build_mlp(2, [4], 2)])
    with pytest.raises(ContractError):
        fedavg([build_mlp(2, [3], 2)], [0.0])
    with pytest.raises(ContractError):
        fedavg([])


# -- run_federation -----------------------------------------------------------------------


def test_identical_clients_one_round_equals_single_client():
    base = _blob_clients(1)[0]
    # same id -> same derived local seed, same data -> identical local models
    clients = [ClientDataset(0, base.train, base.test) for _ in range(3)]
    cfg = FederationConfig(3, rounds=1, local_epochs=1, batch_size=16, sgd=SgdConfig(0.1), seed=0)
    state = run_federation(clients, cfg, _mlp_builder(), evaluate=False)
    for m in state.client_models:
        assert all(m.params[k].data.tobytes() == state.server_model.params[k].data.tobytes() for k in m.params)


def test_run_federation_accounting_and_broadcast_invariant():
    clients = _blob_clients(5)
    cfg = FederationConfig(5, rounds=4, local_epochs=1, batch_size=16, sgd=SgdConfig(0.05, 0.9), seed=1)
    state = run_federation(clients, cfg, _mlp_builder())
    assert len(state.comm_log) == 2 * 5 * 4
    nbytes = serialized_size(state.server_model)
    assert all(r.bytes == nbytes for r in state.comm_log)
    assert [r["broadcast_max_abs_diff"] for r in state.round_log] == [0.0] * 4
    assert state.wall_clock["train"] > 0
    assert len(state.round_log[0]["clients"]) == 5 and len(state.round_log[0]["server_test_acc"]) == 5


def test_run_federation_reaches_090_on_iid_blobs():
    clients = _blob_clients(5, per=200, seed=2)
    cfg = FederationConfig(5, rounds=10, local_epochs=1, batch_size=16, sgd=SgdConfig(0.05, 0.9), seed=0)
    state = run_federation(clients, cfg, _mlp_builder())
    assert np.mean(evaluate_clients(state.server_model, clients)) >= 0.9


def test_run_federation_deterministic():
    clients = _blob_clients(3)
    cfg = FederationConfig(3, rounds=2, local_epochs=1, batch_size=16, sgd=SgdConfig(0.05, 0.9), seed=4)
    a = run_federation(clients, cfg, _mlp_builder(), evaluate=False).server_model
    b = run_federation(clients, cfg, _mlp_builder(), evaluate=False).server_model
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_parallel_mode_matches_serial():
    clients = _blob_clients(3)
    kw = dict(rounds=2, local_epochs=1, batch_size=16, sgd=SgdConfig(0.05, 0.9), seed=4)
    a = run_federation(clients, FederationConfig(3, **kw), _mlp_builder(), evaluate=False).server_model
    b = run_federation(clients, FederationConfig(3, parallel=True, **kw), _mlp_builder(), evaluate=False).server_model
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_run_federation_client_count_mismatch():
    with pytest.raises(ContractError):
        run_federation(_blob_clients(2), FederationConfig(3), _mlp_builder())


def test_local_failure_names_client():
    clients = _blob_clients(2)
    bad = ClientDataset(1, clients[1].train.subset([]), clients[1].test)
    with pytest.raises(RuntimeError, match="client 1"):
        run_federation([clients[0], bad], FederationConfig(2, rounds=1), _mlp_builder(), evaluate=False)


def test_config_validation():
    with pytest.raises(ContractError):
        FederationConfig(2, rounds=0)
    with pytest.raises(ContractError):
        FederationConfig(2, batch_size=0)
    with pytest.raises(ContractError):
        FederationConfig(2, weighting="median")


# -- retrain baseline -------------------------------------------------------------------------


def test_retrain_baseline_uses_retain_and_times():
    clients = _blob_clients(3)
    clients[0] = split_forget(clients[0], 0.1, seed=0)
    cfg = FederationConfig(3, rounds=2, batch_size=16, sgd=SgdConfig(0.05), seed=0)
    model, seconds = retrain_baseline(clients, 0, cfg, _mlp_builder())
    assert seconds > 0
    sets = [clients[0].retain, clients[1].train, clients[2].train]
    ref = run_federation(clients, cfg, _mlp_builder(), train_sets=sets, evaluate=False).server_model
    assert all(model.params[k].data.tobytes() == ref.params[k].data.tobytes() for k in ref.params)


def test_retrain_single_forget_sample_stays_close():
    clients = _blob_clients(3)
    c0 = clients[0]
    one = ClientDataset(0, c0.train, c0.test, forget=c0.train.subset([0]), retain=c0.train.subset(range(1, len(c0.train))))
    clients[0] = one
    cfg = FederationConfig(3, rounds=2, batch_size=16, sgd=SgdConfig(0.05), seed=0)
    full = run_federation(clients, cfg, _mlp_builder(), evaluate=False).server_model
    model, _ = retrain_baseline(clients, 0, cfg, _mlp_builder())
    x = np.concatenate([c.test.features for c in clients])
    agree = np.mean(full.predict(x) == model.predict(x))
    assert agree >= 0.95


def test_retrain_needs_forget_set():
    clients = _blob_clients(2)
    with pytest.raises(ContractError):
        retrain_baseline(clients, 0, FederationConfig(2), _mlp_builder())
    with pytest.raises(ContractError):
        retrain_baseline(clients, 7, FederationConfig(2), _mlp_builder())
