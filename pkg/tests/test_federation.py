import numpy as np
import pytest

from fedbn_sim.datagen import make_gaussian_pair_client, make_offdiag_cov
from fedbn_sim.federation import (
    FEDAVG,
    FEDBN,
    FEDPROX,
    SINGLESET,
    ClientState,
    DivergenceError,
    FederationConfig,
    FederationTrace,
    TraceRecord,
    _batches,
    admit_new_client,
    aggregate,
    broadcast,
    get_array,
    local_update,
    param_entries,
    run_federation,
)
from fedbn_sim.model import EVAL, TRAIN, init_mlp, init_theory, mlp_backward, mlp_forward, update_running_stats
from fedbn_sim.numerics import make_rng

D = 4


def make_clients(N=2, M=12, same_data=False, model="mlp", seed=0):
    covs = [np.eye(D), make_offdiag_cov(D, 0.2)]
    if model == "mlp":
        init = init_mlp(D, 6, 2, 1.0, make_rng(seed, 0))
    else:
        init = init_theory(8, D, N, 1.0, make_rng(seed, 0))
    out = []
    for i in range(N):
        src = 0 if same_data else i
        ds = make_gaussian_pair_client(i, covs[src % 2], M, make_rng(seed, 1, src), center=(model == "theory"))
        out.append(ClientState(i, init.copy(), ds, make_rng(seed, 2, src)))
    return out


def cfg(**kw):
    base = dict(N=2, E=1, T=5, lr=1e-2, strategy=FEDAVG, reduction="mean")
    base.update(kw)
    return FederationConfig(**base)


def same_trace(a, b):
    rows = lambda t: np.array([[getattr(r, f) for f in TraceRecord.__dataclass_fields__] for r in t.records])
    return len(a.records) == len(b.records) and np.array_equal(rows(a), rows(b), equal_nan=True)


def all_arrays(p):
    return [(key, is_bn, get_array(p, key)) for key, is_bn, _ in param_entries(p)]


def test_config_validation_and_round_trip(tmp_path):
    c = cfg(batch_size=4, mu=0.5)
    path = tmp_path / "c.json"
    import json
    path.write_text(json.dumps(c.to_dict()))
    assert FederationConfig.from_json(path) == c
    for bad in (dict(T=5, E=2), dict(lr=0.0), dict(strategy="x"), dict(batch_size=1), dict(mu=-1.0)):
        with pytest.raises(ValueError):
            cfg(**bad)
    with pytest.raises(ValueError, match="unknown"):
        FederationConfig.from_dict({"N": 2, "bogus": 1})


def test_batches_cover_and_merge_singletons():
    b = _batches(7, 3, make_rng(0))
    assert [len(x) for x in b] == [3, 4]
    assert sorted(np.concatenate(b)) == list(range(7))
    assert len(_batches(7, None, make_rng(0))) == 1


def test_aggregate_single_client_is_identity():
    c = make_clients(N=1)
    g = aggregate(c, FEDAVG)
    for (_, _, a), (_, _, b) in zip(all_arrays(g), all_arrays(c[0].params)):
        np.testing.assert_array_equal(a, b)


def test_aggregate_symmetric_pair_cancels():
    c = make_clients(N=2)
    p1 = c[1].params
    for key, _, arr in all_arrays(c[0].params):
        from fedbn_sim.federation import set_array
        set_array(p1, key, -arr)
    g = aggregate(c, FEDAVG)
    for _, _, a in all_arrays(g):
        np.testing.assert_array_equal(a, 0.0)


def test_aggregate_order_independent():
    c = make_clients(N=2)
    c = [local_update(x, 1, cfg()) for x in c]
    a, b = aggregate(c, FEDAVG), aggregate(c[::-1], FEDAVG)
    for (_, _, x), (_, _, y) in zip(all_arrays(a), all_arrays(b)):
        np.testing.assert_array_equal(x, y)


def test_broadcast_rules():
    c = [local_update(x, 1, cfg()) for x in make_clients()]
    g = aggregate(c, FEDBN)
    fedbn = broadcast(g, c, FEDBN)
    for new, old in zip(fedbn, c):
        for (key, is_bn, a), (_, _, b) in zip(all_arrays(new.params), all_arrays(old.params)):
            np.testing.assert_array_equal(a, b if is_bn else get_array(g, key))
    assert broadcast(g, c, SINGLESET) is c


def test_local_update_does_not_mutate_input():
    c = make_clients()[0]
    before = [a.copy() for _, _, a in all_arrays(c.params)]
    state = c.rng.bit_generator.state
    local_update(c, 2, cfg(batch_size=4))
    for a, (_, _, b) in zip(before, all_arrays(c.params)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_equal(c.rng.bit_generator.state, state)


def test_single_client_matches_plain_sgd():
    lr, T = 1e-2, 4
    c = make_clients(N=1)
    trace, out = run_federation(cfg(N=1, T=T, lr=lr), c)
    p = c[0].params.copy()
    X, y = c[0].dataset.features, c[0].dataset.labels
    for _ in range(T):
        g = mlp_backward(p, X, y)
        for (li, name), grad in g.grads.items():
            setattr(p.layers[li], name, getattr(p.layers[li], name) - lr * grad)
        update_running_stats(p, g.batch_stats)
    for (_, _, a), (_, _, b) in zip(all_arrays(out[0].params), all_arrays(p)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    assert len(trace.records) == T


def test_single_client_strategies_coincide():
    traces = [run_federation(cfg(N=1, strategy=s), make_clients(N=1))[0] for s in (FEDAVG, FEDBN, SINGLESET)]
    for t in traces[1:]:
        assert same_trace(t, traces[0])


def test_sum_reduction_scales_step():
    c = make_clients(N=1, M=10)
    a = run_federation(cfg(N=1, T=1, lr=1e-2, reduction="sum"), c)[1][0].params
    b = run_federation(cfg(N=1, T=1, lr=1e-1, reduction="mean"), c)[1][0].params
    for (_, _, x), (_, _, y) in zip(all_arrays(a), all_arrays(b)):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_fedprox_adds_proximal_pull():
    c = make_clients()[0]
    shifted = c.params.copy()
    delta = {}
    for key, _, trainable in param_entries(shifted):
        if trainable:
            arr = get_array(shifted, key)
            delta[key] = np.full_like(arr, 0.3)
            from fedbn_sim.federation import set_array
            set_array(shifted, key, arr - delta[key])
    lr, mu = 1e-2, 0.5
    avg = local_update(c, 1, cfg(lr=lr, strategy=FEDAVG))
    prox = local_update(c, 1, cfg(lr=lr, strategy=FEDPROX, mu=mu), global_snapshot=shifted)
    for key, arr in delta.items():
        np.testing.assert_allclose(get_array(prox.params, key), get_array(avg.params, key) - lr * mu * arr,
                                   rtol=1e-12, atol=1e-14)


def test_fedprox_with_zero_mu_equals_fedavg():
    a = run_federation(cfg(E=2, T=4, strategy=FEDAVG), make_clients())[0]
    b = run_federation(cfg(E=2, T=4, strategy=FEDPROX, mu=0.0), make_clients())[0]
    assert same_trace(a, b)


def test_fedprox_differs_with_multiple_local_epochs():
    a = run_federation(cfg(E=2, T=4, strategy=FEDAVG), make_clients())[0]
    b = run_federation(cfg(E=2, T=4, strategy=FEDPROX, mu=5.0), make_clients())[0]
    assert not same_trace(a, b)


@pytest.mark.parametrize("model", ["mlp", "theory"])
def test_fedbn_invariant_after_every_aggregation(model):
    clients = make_clients(model=model)
    c = cfg(T=1, strategy=FEDBN, loss="squared" if model == "theory" else "cross_entropy", model_kind=model)
    for _ in range(4):
        _, clients = run_federation(c, clients)
        a, b = (all_arrays(x.params) for x in clients)
        bn_differs = False
        for (key, is_bn, x), (_, _, y) in zip(a, b):
            if is_bn:
                bn_differs |= not np.array_equal(x, y)
            else:
                assert np.array_equal(x, y), key
        assert bn_differs


def test_fedavg_all_arrays_equal_after_aggregation():
    _, clients = run_federation(cfg(T=3), make_clients())
    for (_, _, x), (_, _, y) in zip(*(all_arrays(c.params) for c in clients)):
        assert np.array_equal(x, y)


def test_theory_fedavg_keeps_gamma_tied():
    c = cfg(T=3, loss="squared", model_kind="theory")
    _, clients = run_federation(c, make_clients(model="theory"))
    g = clients[0].params.gamma
    assert np.all(g == g[:, :1])


def test_identical_data_fedbn_equals_fedavg():
    a = run_federation(cfg(strategy=FEDAVG), make_clients(same_data=True))[0]
    b = run_federation(cfg(strategy=FEDBN), make_clients(same_data=True))[0]
    assert same_trace(a, b)


def test_results_independent_of_worker_count():
    a = run_federation(cfg(batch_size=5, strategy=FEDBN), make_clients(), workers=1)
    b = run_federation(cfg(batch_size=5, strategy=FEDBN), make_clients(), workers=4)
    assert same_trace(a[0], b[0])


def test_single_aggregation_when_e_equals_t():
    trace, clients = run_federation(cfg(E=5, T=5), make_clients())
    assert {r.round for r in trace.records} == {1}
    early = [r for r in trace.records if r.epoch == 1]
    assert early[0].train_loss != early[1].train_loss
    late = [r for r in trace.records if r.epoch == 5]
    assert late[0].train_loss != late[1].train_loss  # same weights, different data
    for (_, _, x), (_, _, y) in zip(*(all_arrays(c.params) for c in clients)):
        assert np.array_equal(x, y)


def test_client_count_mismatch():
    with pytest.raises(ValueError):
        run_federation(cfg(N=3), make_clients())


def test_divergence_raises():
    c = make_clients(model="theory")
    with pytest.raises(DivergenceError) as info:
        run_federation(cfg(T=50, lr=1e4, loss="squared", model_kind="theory"), c)
    assert info.value.epoch >= 1


def test_trace_csv_round_trip_and_checks(tmp_path):
    trace, _ = run_federation(cfg(T=3), make_clients(), test_sets=[c.dataset for c in make_clients()])
    trace.write_csv(tmp_path / "t.csv")
    back = FederationTrace.read_csv(tmp_path / "t.csv")
    assert same_trace(back, trace)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "round,epoch,client,train_loss,train_acc,test_loss,test_acc"
    assert trace.curve().shape == (3,)
    with pytest.raises(ValueError):
        trace.append(TraceRecord(0, 1, 0, 1.0, 1.0))
    with pytest.raises(ValueError):
        trace.append(TraceRecord(9, 9, 0, float("nan"), 1.0))


def test_admit_new_client():
    _, clients = run_federation(cfg(T=3, strategy=FEDBN), make_clients())
    snapshot = [[a.copy() for _, _, a in all_arrays(c.params)] for c in clients]
    g = aggregate(clients, FEDBN)
    new_ds = make_gaussian_pair_client(2, np.eye(D) * 4.0, 20, make_rng(9))
    new = admit_new_client(g, clients, new_ds, make_rng(10))
    bn = new.params.layers[1]
    np.testing.assert_allclose(bn.gamma, np.mean([c.params.layers[1].gamma for c in clients], axis=0))
    np.testing.assert_array_equal(new.params.layers[0].W, clients[0].params.layers[0].W)
    X = new_ds.features
    np.testing.assert_allclose(mlp_forward(new.params, X, EVAL), mlp_forward(new.params, X, TRAIN), rtol=1e-10)
    for snap, c in zip(snapshot, clients):
        for a, (_, _, b) in zip(snap, all_arrays(c.params)):
            np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        admit_new_client(g, [], new_ds, make_rng(0))
    with pytest.raises(TypeError):
        admit_new_client(init_theory(3, D, 1, 1.0, make_rng(0)), clients, new_ds, make_rng(0))
