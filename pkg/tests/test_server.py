import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvi import server
from pvi.baselines import global_vi, global_vi_step
from pvi.data import Dataset, synth_linreg, synth_logreg
from pvi.expfam import ApproxFactor, GaussianMeanField, NotNormalizable
from pvi.localopt import OptimizerConfig
from pvi.models import ModelSpec, exact_posterior
from pvi.server import Delta, RejectedUnnormalizable, Schedule

LIN1 = ModelSpec("linear_regression", 1)
PRIOR1 = GaussianMeanField.standard(1)
TWO = [Dataset([[1.0]], [1.0]), Dataset([[1.0]], [-1.0])]
THIRD = GaussianMeanField.from_moments([0.0], [1 / 3])


def _logistic_clients(M=2, n=40, d=1, seed=0):
    data = synth_logreg(d, n, weight_seed=seed, seed=seed + 1)
    return [data.subset(np.arange(k, n, M)) for k in range(M)], data


def _check_invariants(state):
    assert state.factorization_error() < 1e-9
    assert state.q.is_normalizable()


def test_init_examples():
    s = server.init(PRIOR1, 1)
    assert s.M == 1 and s.comms == 0
    s = server.init(GaussianMeanField.standard(3), 10)
    assert s.M == 10 and all(np.all(f.naturals() == 0) for f in s.factors)
    assert s.q.naturals().tolist() == GaussianMeanField.standard(3).naturals().tolist()
    with pytest.raises(NotNormalizable):
        server.init(GaussianMeanField([0.0], [0.1]), 2)


def test_select_examples():
    s = server.init(PRIOR1, 3)
    s4 = server.ServerState(s.prior, s.q, s.factors, iteration=4)
    assert server.select(s4, Schedule("sequential_fixed")) == [1]
    assert server.select(server.init(PRIOR1, 10), Schedule("synchronous")) == list(range(10))
    seq = Schedule("sequential_random")
    picks = [server.select(server.ServerState(s.prior, s.q, s.factors, iteration=i, seed=5), seq)[0]
             for i in range(3)]
    again = [server.select(server.ServerState(s.prior, s.q, s.factors, iteration=i, seed=5), seq)[0]
             for i in range(3)]
    assert picks == again and sorted(picks) == [0, 1, 2]


def test_apply_deltas_examples():
    s = server.init(PRIOR1, 2)
    one = server.apply_deltas(s, [Delta(0, ApproxFactor([1.0], [-0.1]))], 1.0)
    np.testing.assert_allclose(one.q.naturals().ravel(), [1.0, -0.6])
    half = server.apply_deltas(s, [Delta(0, ApproxFactor([1.0], [-0.1]))], 0.5)
    np.testing.assert_allclose(half.q.naturals().ravel(), [0.5, -0.55])
    _check_invariants(half)
    with pytest.raises(RejectedUnnormalizable) as err:
        server.apply_deltas(s, [Delta(0, ApproxFactor([0.0], [0.3])), Delta(1, ApproxFactor([0.0], [0.3]))], 1.0)
    assert err.value.dims == (0,)
    with pytest.raises(ValueError):
        server.apply_deltas(s, [Delta(0, ApproxFactor.unit(1)), Delta(0, ApproxFactor.unit(1))], 1.0)
    with pytest.raises(ValueError):
        Delta(0, ApproxFactor.unit(1), staleness=-1)


def test_sequential_conjugate_one_pass():
    res = server.run(server.init(PRIOR1, 2), Schedule("sequential_fixed", rounds=1), TWO, LIN1)
    assert res.state.comms == 2
    assert res.state.q.max_abs_diff(THIRD) < 1e-12


def test_synchronous_conjugate_damped():
    res = server.run(server.init(PRIOR1, 2), Schedule("synchronous", rho=0.5, rounds=30, tol=1e-9), TWO, LIN1)
    assert len(res.trace) - 1 <= 30
    assert np.abs(res.state.q.mean[0]) < 1e-6 and abs(res.state.q.var[0] - 1 / 3) < 1e-6


def test_zero_rounds_records_only_prior():
    res = server.run(server.init(PRIOR1, 2), Schedule("sequential_fixed", rounds=0), TWO, LIN1,
                     evaluate=lambda q: {"m": float(q.mean[0])})
    assert len(res.trace) == 1 and res.trace.records[0]["m"] == 0.0


def test_invariants_hold_after_every_commit():
    clients, _ = _logistic_clients(3, 60)
    model = ModelSpec("logistic_regression", 1)
    states = []

    def evaluate(q):
        states.append(q)
        return {}

    for kind in ("sequential_fixed", "synchronous", "asynchronous"):
        res = server.run(server.init(GaussianMeanField.standard(2), 3), Schedule(kind, rounds=5), clients, model,
                         evaluate=evaluate)
        _check_invariants(res.state)
        assert res.rejections == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_sequential_unit_damping_never_rejects(seed, M):
    clients, _ = _logistic_clients(M, 10 * M + 5, d=2, seed=seed)
    model = ModelSpec("logistic_regression", 2)
    res = server.run(server.init(GaussianMeanField.standard(3), M),
                     Schedule("sequential_random", rounds=3), clients, model)
    assert res.rejections == 0
    _check_invariants(res.state)


@pytest.mark.parametrize("kind", ["sequential_fixed", "synchronous", "asynchronous"])
@pytest.mark.parametrize("M", [1, 2, 5])
def test_partition_invariance_of_conjugate_fixed_point(kind, M):
    model = ModelSpec("linear_regression", 2)
    # ten orthogonal blocks, so every union of blocks keeps a diagonal Gram matrix
    blocks = [synth_linreg(2, 4, seed=b, orthogonal=True) for b in range(10)]
    prior = GaussianMeanField.standard(2)
    target = exact_posterior(model, prior, Dataset.concat(blocks))
    clients = [Dataset.concat(blocks[k::M]) for k in range(M)]
    sched = Schedule(kind, rounds=400, tol=1e-13, duration_jitter=0.0)
    res = server.run(server.init(prior, M), sched, clients, model)
    assert res.state.q.max_abs_diff(target) <= 1e-8


def test_communication_accounting():
    clients, _ = _logistic_clients(4, 40)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    for kind in ("sequential_fixed", "synchronous"):
        res = server.run(server.init(prior, 4), Schedule(kind, rounds=3, tol=1e-30), clients, model)
        assert res.state.comms == 12
    res = server.run(server.init(prior, 4), Schedule("asynchronous", rounds=3, tol=1e-30), clients, model)
    assert res.state.comms == len(res.trace) - 1


def test_async_equal_durations_alternate_and_match_sync():
    sched = Schedule("asynchronous", rho=0.5, rounds=60, tol=1e-12, duration_jitter=0.0)
    res = server.run(server.init(PRIOR1, 2), sched, [TWO[0], TWO[1]], LIN1)
    order = [r["client"] for r in res.trace.records[1:]]
    assert order[:6] == [0, 1, 0, 1, 0, 1]
    sync = server.run(server.init(PRIOR1, 2), Schedule("synchronous", rho=0.5, rounds=60, tol=1e-12), TWO, LIN1)
    assert res.state.q.max_abs_diff(sync.state.q) < 1e-5


def test_async_slow_client():
    sched = Schedule("asynchronous", rho=0.5, rounds=40, tol=0.0, slowdown=(1.0, 10.0))
    res = server.run(server.init(PRIOR1, 2), sched, TWO, LIN1)
    counts = np.bincount([r["client"] for r in res.trace.records[1:]], minlength=2)
    assert counts[0] >= 8 * counts[1] and counts[1] >= 1
    assert max(r["staleness"] for r in res.trace.records[1:]) >= 5


def test_async_does_not_stop_while_a_slow_client_is_still_moving():
    sched = Schedule("asynchronous", rho=0.5, rounds=500, tol=1e-12, slowdown=(1.0, 10.0))
    res = server.run(server.init(PRIOR1, 2), sched, TWO, LIN1)
    assert res.state.q.max_abs_diff(THIRD) < 1e-9


def test_async_single_client_is_sequential():
    clients, _ = _logistic_clients(1, 30)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    a = server.run(server.init(prior, 1), Schedule("asynchronous", rounds=4, tol=1e-30), clients, model)
    s = server.run(server.init(prior, 1), Schedule("sequential_fixed", rounds=4, tol=1e-30), clients, model)
    np.testing.assert_array_equal(a.state.q.naturals(), s.state.q.naturals())


def test_runs_are_deterministic():
    clients, _ = _logistic_clients(3, 45, d=2)
    model = ModelSpec("logistic_regression", 2)
    prior = GaussianMeanField.standard(3)
    ev = lambda q: {"m0": float(q.mean[0])}  # noqa: E731
    for kind in ("sequential_random", "synchronous", "asynchronous"):
        runs = [server.run(server.init(prior, 3, seed=11), Schedule(kind, rounds=4), clients, model,
                           OptimizerConfig(method="gradient", estimator="mc", max_steps=30), ev).trace.to_jsonl()
                for _ in range(2)]
        assert runs[0] == runs[1]


def test_threaded_synchronous_matches_serial():
    clients, _ = _logistic_clients(4, 60, d=2)
    model = ModelSpec("logistic_regression", 2)
    prior = GaussianMeanField.standard(3)
    a = server.run(server.init(prior, 4), Schedule("synchronous", rounds=5), clients, model)
    b = server.run(server.init(prior, 4), Schedule("synchronous", rounds=5, threads=3), clients, model)
    assert a.trace.to_jsonl() == b.trace.to_jsonl()
    np.testing.assert_array_equal(a.state.q.naturals(), b.state.q.naturals())


def test_damping_warning_and_defaults():
    assert Schedule("sequential_fixed").damping(5) == 1.0
    assert Schedule("synchronous").damping(4) == 0.25
    with pytest.warns(UserWarning):
        Schedule("synchronous", rho=0.9).damping(4)
    with pytest.raises(ValueError):
        Schedule("synchronous", rho=0.0)


def test_rejection_policy_halves_rho():
    s = server.init(PRIOR1, 2)
    deltas = [Delta(0, ApproxFactor([0.0], [0.3])), Delta(1, ApproxFactor([0.0], [0.3]))]
    state, used, rej = server._commit(s, deltas, 1.0, Schedule("synchronous"))
    assert used == 0.5 and rej == 1 and state.q.eta2[0] == pytest.approx(-0.2)
    with pytest.raises(RejectedUnnormalizable):
        server._commit(s, deltas, 1.0, Schedule("synchronous", policy="abort"))


def test_single_step_gradient_form_matches_global_vi():
    clients, full = _logistic_clients(2, 40)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    state, q = server.init(prior, 2), prior
    for _ in range(20):
        state = server.single_step_mode(state, clients, model, "gradient", 0.05)
        q = global_vi_step(prior, model, full, q, "gradient", 0.05)
        assert state.q.max_abs_diff(q) <= 1e-12
        _check_invariants(state)


@pytest.mark.parametrize("rho", [0.3, 1.0])
def test_single_step_fixed_point_form_matches_global_vi(rho):
    clients, full = _logistic_clients(3, 45)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    state, q = server.init(prior, 3), prior
    for _ in range(10):
        state = server.single_step_mode(state, clients, model, "fixed_point", rho)
        q = global_vi_step(prior, model, full, q, "fixed_point", rho)
        assert state.q.max_abs_diff(q) <= 1e-12


def test_single_client_single_step_is_global_vi():
    clients, full = _logistic_clients(1, 20)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    state = server.single_step_mode(server.init(prior, 1), clients, model, "gradient", 0.1)
    assert state.q.max_abs_diff(global_vi_step(prior, model, full, prior, "gradient", 0.1)) <= 1e-15


def test_pvi_converges_to_global_vi_on_2d_logistic():
    clients, full = _logistic_clients(3, 90, d=1, seed=4)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    res = server.run(server.init(prior, 3), Schedule("sequential_fixed", rounds=50, tol=1e-9), clients, model,
                     OptimizerConfig(tol=1e-10))
    glob = global_vi(prior, model, full, OptimizerConfig(tol=1e-10))
    assert res.state.q.max_abs_diff(glob) < 1e-3


def test_trace_round_trip():
    res = server.run(server.init(PRIOR1, 2), Schedule("sequential_fixed", rounds=1), TWO, LIN1,
                     evaluate=lambda q: {"v": float(q.var[0])})
    back = server.MetricsTrace.from_jsonl(res.trace.to_jsonl())
    assert back.records == res.trace.records
    np.testing.assert_allclose(back.column("v"), [1.0, 0.5, 1 / 3])
