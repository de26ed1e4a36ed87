import math

import numpy as np
import pytest
import torch

from modules.metacv import autodiff
from modules.metacv.errors import DimensionMismatchError, EmptySetError, NonFiniteError
from modules.metacv.estimators import (
    CI95_MULTIPLIER,
    Estimate,
    TaskDataset,
    cv_estimate,
    empirical_loss,
    loss_fn,
    mc_estimate,
    task_errors,
)
from modules.metacv.network import BoundaryCorrection, CVParameters, NetworkSpec, init_params
from modules.metacv.stein import SteinCV, gaussian_score
from modules.metacv.training import train_neural_cv


@pytest.fixture
def cv():
    spec = NetworkSpec(input_dim=1, hidden_widths=(6, 6))
    return SteinCV(spec=spec, bc=BoundaryCorrection(), score=gaussian_score)


@pytest.fixture
def dataset():
    rng = np.random.default_rng(11)
    points = rng.standard_normal((10, 1))
    return TaskDataset.from_arrays(points, -points, np.exp(points[:, 0] / 2.0))


def test_estimate_from_samples():
    estimate = Estimate.from_samples([1.0, 2.0, 3.0, 4.0])
    assert estimate.value == 2.5
    assert estimate.n == 4
    assert estimate.std_error == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
    assert estimate.ci95_halfwidth == pytest.approx(CI95_MULTIPLIER * estimate.std_error)
    single = Estimate.from_samples([7.0])
    assert single.value == 7.0 and single.std_error == 0.0
    with pytest.raises(EmptySetError):
        Estimate.from_samples([])


def test_mc_estimate_is_plain_mean():
    assert mc_estimate(np.array([0.5, 1.5, 4.0])).value == pytest.approx(2.0)


def test_dataset_split(dataset):
    assert dataset.size == 10 and dataset.dim == 1 and dataset.support_size == 5
    assert len(dataset.support) == 5 and len(dataset.query) == 5
    assert torch.equal(torch.cat([dataset.support.values, dataset.query.values]), dataset.values)
    assert dataset.points.dtype == torch.float64


def test_dataset_shuffle_is_seeded():
    points = np.arange(8, dtype=float).reshape(-1, 1)
    first = TaskDataset.from_arrays(points, -points, points[:, 0], rng=np.random.default_rng(3))
    second = TaskDataset.from_arrays(points, -points, points[:, 0], rng=np.random.default_rng(3))
    assert torch.equal(first.values, second.values)
    assert sorted(first.values.tolist()) == list(range(8))
    # точки, скоры и значения переставлены согласованно
    assert torch.equal(first.points[:, 0], first.values)


def test_dataset_validation():
    with pytest.raises(DimensionMismatchError):
        TaskDataset.from_arrays(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(3))
    with pytest.raises(NonFiniteError):
        TaskDataset.from_arrays(np.zeros((2, 1)), np.zeros((2, 1)), [1.0, float("inf")])
    with pytest.raises(ValueError):
        TaskDataset.from_arrays(np.zeros((2, 1)), np.zeros((2, 1)), [1.0, 2.0], support_size=3)


def test_zero_network_reduces_to_monte_carlo(cv, dataset):
    zero = CVParameters(gamma0=3.7, weights=torch.zeros(init_params(cv.spec).weights.shape[0], dtype=torch.float64))
    estimate = cv_estimate(cv, zero, dataset)
    reference = mc_estimate(dataset.query.values)
    assert estimate.value == pytest.approx(reference.value, rel=1e-12)
    assert estimate.std_error == pytest.approx(reference.std_error, rel=1e-12)


def test_estimate_invariant_to_gamma0(cv, dataset):
    params = init_params(cv.spec, sigma_init=0.3, seed=1)
    first = cv_estimate(cv, params.with_gamma0(-10.0), dataset)
    second = cv_estimate(cv, params.with_gamma0(25.0), dataset)
    assert first.value == second.value


def test_empty_query_rejected(cv):
    points = np.zeros((4, 1))
    data = TaskDataset.from_arrays(points, points, np.ones(4), support_size=4)
    with pytest.raises(EmptySetError):
        cv_estimate(cv, init_params(cv.spec), data)


def test_loss_with_zero_network_is_mean_squared_offset(cv, dataset):
    support = dataset.support
    zero = CVParameters(gamma0=0.4, weights=torch.zeros(init_params(cv.spec).weights.shape[0], dtype=torch.float64))
    expected = float(torch.mean((support.values - 0.4) ** 2))
    assert empirical_loss(cv, zero, support) == pytest.approx(expected, rel=1e-12)


def test_penalty_skips_gamma0(cv, dataset):
    support = dataset.support
    params = init_params(cv.spec, sigma_init=0.2, seed=4)
    lam = 0.01
    plain = loss_fn(cv, support, 0.0)(params.flat())
    shifted = params.with_gamma0(1.0).flat()
    penalised = loss_fn(cv, support, lam)(shifted) - loss_fn(cv, support, 0.0)(shifted)
    assert float(penalised) == pytest.approx(lam * float(torch.sum(params.weights ** 2)), rel=1e-9)
    assert float(plain) > 0.0
    with pytest.raises(ValueError):
        loss_fn(cv, support, -1.0)


def test_task_errors():
    estimates = [Estimate.from_samples([1.0]), Estimate.from_samples([-2.0])]
    errors = task_errors(estimates, [0.0, 0.0])
    assert errors.per_task == [1.0, 2.0]
    assert errors.mae == 1.5
    assert errors.mae_ci95 == pytest.approx(1.96 * np.std([1.0, 2.0], ddof=1) / math.sqrt(2))
    with pytest.raises(DimensionMismatchError):
        task_errors(estimates, [0.0])
    with pytest.raises(EmptySetError):
        task_errors([], [])


def gaussian_exp_task(rng, n):
    # E[exp(X/2)] = exp(1/8) под N(0,1)
    points = rng.standard_normal((n, 1))
    return TaskDataset.from_arrays(points, -points, np.exp(points[:, 0] / 2.0))


def test_estimators_are_unbiased_over_replications(cv):
    truth = math.exp(1.0 / 8.0)
    rng = np.random.default_rng(2024)
    params = train_neural_cv(cv, gaussian_exp_task(rng, 40), epochs=10, batch_size=5, seed=3, sigma_init=0.1)

    mc_values, cv_values = [], []
    for _ in range(500):
        data = gaussian_exp_task(rng, 20)
        mc_values.append(mc_estimate(data.query.values).value)
        cv_values.append(cv_estimate(cv, params, data).value)
    for values in (np.array(mc_values), np.array(cv_values)):
        std_error = values.std(ddof=1) / math.sqrt(values.shape[0])
        assert abs(values.mean() - truth) <= 4.0 * std_error


def test_gradient_step_decreases_empirical_loss():
    spec = NetworkSpec(input_dim=2, hidden_widths=(4,))
    cv = SteinCV(spec=spec, bc=BoundaryCorrection(), score=gaussian_score)
    rng = np.random.default_rng(17)
    for draw in range(50):
        points = rng.standard_normal((6, 2))
        data = TaskDataset.from_arrays(points, -points, np.sin(points @ rng.uniform(0.5, 2.0, size=2)), support_size=6)
        params = init_params(spec, sigma_init=0.5, gamma0_init=float(rng.standard_normal()), seed=draw)
        lam = float(rng.choice([0.0, 1e-2]))
        before = empirical_loss(cv, params, data.support, lam)
        gradient = autodiff.grad_params(loss_fn(cv, data.support, lam), params.flat())
        after = [
            empirical_loss(cv, CVParameters.from_flat(params.flat() - alpha * gradient), data.support, lam)
            for alpha in (1e-2, 1e-3, 1e-4)
        ]
        assert before >= 0.0 and min(after) >= 0.0
        assert min(after) < before


def test_estimate_examples():
    constant = Estimate.from_samples([2.0, 2.0, 2.0, 2.0])
    assert (constant.value, constant.std_error) == (2.0, 0.0)
    assert mc_estimate([0.0, 1.0]).value == 0.5
    uniform = np.random.default_rng(0).uniform(size=100_000)
    assert abs(mc_estimate(uniform).value - 0.5) <= 0.005


def test_loss_examples(cv):
    zero = CVParameters(gamma0=0.0, weights=torch.zeros(init_params(cv.spec).weights.shape[0], dtype=torch.float64))
    points = np.array([[0.3], [-0.8]])
    two_values = TaskDataset.from_arrays(points, -points, [1.0, -1.0], support_size=2).support
    assert empirical_loss(cv, zero, two_values) == 1.0
    flat = TaskDataset.from_arrays(points, -points, [0.0, 0.0], support_size=2).support
    assert empirical_loss(cv, zero, flat, lam=5e-6) == 0.0


def test_task_errors_examples():
    exact = [Estimate.from_samples([0.1]), Estimate.from_samples([-0.4])]
    assert task_errors(exact, [0.1, -0.4]).mae == 0.0
    single = task_errors([Estimate.from_samples([1.3])], [1.0])
    assert single.mae == pytest.approx(0.3, abs=1e-15) and single.mae_ci95 == 0.0
    assert task_errors([Estimate.from_samples([1.0]), Estimate.from_samples([3.0])], [0.0, 0.0]).mae == 2.0


def test_constant_residuals_have_zero_spread(cv):
    points = np.random.default_rng(3).standard_normal((8, 1))
    data = TaskDataset.from_arrays(points, -points, np.full(8, 2.5))
    zero = CVParameters(gamma0=1.0, weights=torch.zeros(init_params(cv.spec).weights.shape[0], dtype=torch.float64))
    estimate = cv_estimate(cv, zero, data)
    assert (estimate.value, estimate.std_error) == (2.5, 0.0)
