import math

import numpy as np
import pytest

from hcmnet.estimator import (Dataset, Predictor, TrainConfig, empirical_risk, fit, l2_error, loss_and_grad,
                              predict, truncate)
from hcmnet.hcm import HCMSpec, evaluate_hcm, fig3_model, leaf, single_node_model
from hcmnet.network import Network, NetworkClass, forward, in_class


def small_net(rng, d, widths, scale=1.0):
    dims = [d] + list(widths) + [1]
    return Network(tuple(rng.uniform(-scale, scale, (dims[s + 1], dims[s] + 1)) for s in range(len(dims) - 1)))


def test_risk_of_zero_net():
    zero = Network((np.zeros((2, 2)), np.zeros((1, 3))))
    data = Dataset(np.linspace(-1, 1, 7)[:, None], np.full(7, 2.0))
    assert empirical_risk(zero, data) == 4.0


def test_risk_of_interpolating_net():
    rng = np.random.default_rng(0)
    net = small_net(rng, 2, [3])
    X = rng.uniform(-1, 1, (25, 2))
    assert empirical_risk(net, Dataset(X, forward(net, X))) == 0.0


def test_risk_summation_orders_agree():
    rng = np.random.default_rng(1)
    net = small_net(rng, 3, [4, 4])
    X = rng.uniform(-1, 1, (500, 3))
    y = rng.normal(size=500)
    res = forward(net, X) - y
    reversed_sum = math.fsum((res[::-1] ** 2).tolist()) / len(y)
    assert abs(empirical_risk(net, Dataset(X, y)) - reversed_sum) <= 1e-10


def test_dataset_support_and_csv(tmp_path):
    with pytest.raises(ValueError):
        Dataset(np.array([[1.5]]), np.array([0.0]), {"a": 1.0})
    data = Dataset(np.random.default_rng(2).uniform(-1, 1, (10, 3)), np.arange(10.0), {"a": 1.0, "seed": 4})
    data.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.xs, data.xs) and np.array_equal(back.ys, data.ys)
    assert back.meta == data.meta
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x1,x2,x3,y"


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = small_net(rng, 2, [3, 2], scale=1.5)
        X = rng.uniform(-1, 1, (30, 2))
        y = rng.normal(size=30)
        ws = [W.copy() for W in net.weights]
        _, grads = loss_and_grad(ws, X, y)
        for s, W in enumerate(ws):
            num = np.empty_like(W)
            for idx in np.ndindex(W.shape):
                h = 1e-6
                old = W[idx]
                W[idx] = old + h
                up = loss_and_grad(ws, X, y)[0]
                W[idx] = old - h
                down = loss_and_grad(ws, X, y)[0]
                W[idx] = old
                num[idx] = (up - down) / (2 * h)
            rel = np.max(np.abs(num - grads[s])) / max(1e-8, np.max(np.abs(num)))
            assert rel <= 1e-5


def test_fit_constant_target():
    X = np.linspace(-1, 1, 50)[:, None]
    res = fit(Dataset(X, np.full(50, 0.8)), NetworkClass(1, 2, 10.0), TrainConfig(epochs=2000, restarts=1))
    assert res.success and res.risk <= 1e-4


def test_fit_linear_target_generalizes():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (200, 1))
    res = fit(Dataset(X, 0.5 * X[:, 0] + 0.2), NetworkClass(2, 8, 10.0), TrainConfig(epochs=2000, restarts=1))
    Xt = np.linspace(-1, 1, 1000)[:, None]
    assert np.mean((forward(res.network, Xt) - (0.5 * Xt[:, 0] + 0.2)) ** 2) <= 1e-2


def test_fit_is_deterministic():
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, (60, 2))
    data = Dataset(X, np.sin(2 * X[:, 0]))
    cfg = TrainConfig(epochs=200, restarts=2, seed=11)
    a = fit(data, NetworkClass(2, 4, 5.0), cfg)
    b = fit(data, NetworkClass(2, 4, 5.0), cfg)
    assert all(np.array_equal(u, v) for u, v in zip(a.network.weights, b.network.weights))
    assert a.restart_risks == b.restart_risks


def test_projection_keeps_network_in_class():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, (80, 1))
    data = Dataset(X, 10 * X[:, 0] ** 3)
    cls = NetworkClass(2, 3, 0.7)
    for init in ("uniform", "identity_chain"):
        res = fit(data, cls, TrainConfig(epochs=300, lr=0.5, restarts=2, init=init))
        assert in_class(res.network, cls)


def test_best_of_restarts_is_monotone():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (60, 1))
    data = Dataset(X, np.cos(3 * X[:, 0]))
    risks = [fit(data, NetworkClass(1, 3, 5.0), TrainConfig(epochs=150, restarts=k, seed=2)).risk
             for k in (1, 2, 3, 4)]
    assert all(b <= a for a, b in zip(risks, risks[1:]))


def test_divergence_retries_with_smaller_steps():
    X = np.linspace(-1, 1, 20)[:, None]
    data = Dataset(X, 1e3 * X[:, 0])
    res = fit(data, NetworkClass(1, 2, math.inf), TrainConfig(epochs=50, lr=1e200, momentum=0.0, restarts=1,
                                                              max_retries=2))
    assert any("halving" in f for f in res.flags)
    assert res.network is not None and math.isfinite(res.risk)


def test_truncate_examples():
    assert truncate(7, 5) == 5 and truncate(-7, 5) == -5 and truncate(3, 5) == 3
    with pytest.raises(ValueError):
        truncate(1.0, 0.0)


def test_predict_truncates():
    big = Network((np.zeros((1, 2)), np.array([[50.0, 0.0]])))
    assert predict(big, 5.0, np.array([0.3])) == 5.0
    assert predict(big, math.inf, np.array([0.3])) == 50.0
    assert predict(big, None, np.array([0.3])) == 50.0
    rng = np.random.default_rng(8)
    net = small_net(rng, 1, [3], scale=20.0)
    grid = np.linspace(-1, 1, 500)[:, None]
    assert np.all(np.abs(predict(net, 2.0, grid)) <= 2.0)


def test_l2_error_of_truth_and_offset():
    spec = fig3_model()
    truth = lambda X: evaluate_hcm(spec, X)  # noqa: E731
    assert l2_error(truth, spec, points=1000, seed=0).value == 0.0
    est = l2_error(lambda X: truth(X) + 1.0, spec, points=1000, seed=0)
    assert abs(est.value - 1.0) <= max(3 * est.stderr, 1e-12)


def test_l2_error_against_quadrature():
    spec = HCMSpec(d=1, level=1, root=leaf("polynomial", [1.0, 2], [1]))
    pred = lambda X: np.sin(3 * X[:, 0])  # noqa: E731
    est = l2_error(pred, spec, points=20_000, seed=3)
    x = (np.arange(10 ** 6) + 0.5) / 10 ** 6 * 2 - 1
    quad = float(np.mean((np.sin(3 * x) - x ** 2) ** 2))
    assert abs(est.value - quad) <= 3 * est.stderr


def test_l2_error_plain_callable_needs_dimension():
    with pytest.raises(ValueError):
        l2_error(lambda X: X[:, 0], lambda X: X[:, 0], points=10, seed=0)
    assert l2_error(lambda X: X[:, 0], lambda X: X[:, 0], points=10, seed=0, d=2).value == 0.0


def test_truncation_never_hurts_bounded_targets():
    rng = np.random.default_rng(9)
    spec = single_node_model(2)
    for _ in range(10):
        net = small_net(rng, 2, [4], scale=5.0)
        raw = l2_error(Predictor(net), spec, points=2000, seed=1)
        cut = l2_error(Predictor(net, 1.0), spec, points=2000, seed=1)
        assert cut.value <= raw.value + 1e-12
