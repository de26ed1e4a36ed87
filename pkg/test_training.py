import numpy as np
import pandas as pd
import pytest
import torch

from modules.metacv import autodiff, training
from modules.metacv.errors import EmptySetError, NumericalAbort, UnsupportedModeError
from modules.metacv.estimators import TaskDataset, loss_fn
from modules.metacv.network import BoundaryCorrection, NetworkSpec, init_params, load_checkpoint
from modules.metacv.stein import SteinCV, stein_values, zero_score
from modules.metacv.training import (
    MetaConfig,
    MetaParameter,
    TraceRow,
    UpdateRule,
    adapt,
    meta_train,
    task_meta_gradient,
    train_neural_cv,
    update_step,
)
from modules.task_environments.oscillatory import OscillatoryEnvironment, sample_oscillatory_tasks


@pytest.fixture
def cv():
    spec = NetworkSpec(input_dim=1, hidden_widths=(6,))
    return SteinCV(spec=spec, bc=BoundaryCorrection("unit_cube_product"), score=zero_score)


@pytest.fixture
def tasks():
    records = sample_oscillatory_tasks(OscillatoryEnvironment(d=1), count=6, n_per_task=10, seed=0)
    return [record.dataset for record in records]


def test_gd_step():
    gamma = torch.tensor([1.0, 2.0], dtype=torch.float64)
    new, rule = update_step(UpdateRule("gd", 0.1), gamma, torch.tensor([0.5, -1.0], dtype=torch.float64))
    assert torch.allclose(new, torch.tensor([0.95, 2.1], dtype=torch.float64))
    assert rule.state is None


def test_adam_first_step_moves_by_alpha_times_sign():
    gamma = torch.zeros(3, dtype=torch.float64)
    grad = torch.tensor([2.0, -0.01, 30.0], dtype=torch.float64)
    new, rule = update_step(UpdateRule("adam", 0.01), gamma, grad)
    assert torch.allclose(new, -0.01 * torch.sign(grad), atol=1e-8)
    assert rule.state.step == 1
    _, rule = update_step(rule, new, grad)
    assert rule.state.step == 2
    assert rule.fresh().state is None


def test_adam_first_step_by_hand():
    new, _ = update_step(UpdateRule("adam", 0.01), torch.zeros(1, dtype=torch.float64), torch.tensor([3.0], dtype=torch.float64))
    # m̂ = 0.3 / 0.1 = 3, v̂ = 0.009 / 0.001 = 9
    assert float(new[0]) == pytest.approx(-0.01 * 3.0 / (3.0 + 1e-8), rel=1e-12)


def test_zero_gradient_keeps_parameters():
    gamma = torch.tensor([0.3, -1.2], dtype=torch.float64)
    new, _ = update_step(UpdateRule("gd", 0.5), gamma, torch.zeros(2, dtype=torch.float64))
    assert torch.equal(new, gamma)


def test_offset_only_descent_converges_to_support_mean(tasks):
    values = tasks[0].support.values
    gamma, rule = torch.zeros(1, dtype=torch.float64), UpdateRule("gd", 0.1)
    for _ in range(200):
        gamma, rule = update_step(rule, gamma, autodiff.grad_params(lambda g: torch.mean((values - g[0]) ** 2), gamma))
    assert float(gamma[0]) == pytest.approx(float(values.mean()), abs=1e-3)


def test_update_rule_validation():
    with pytest.raises(ValueError):
        UpdateRule("sgd", 0.1)
    with pytest.raises(ValueError):
        UpdateRule("gd", 0.0)


def test_meta_config_validation_and_schedule():
    with pytest.raises(UnsupportedModeError):
        MetaConfig(grad_mode="exact", inner_rule="adam")
    with pytest.raises(ValueError):
        MetaConfig(meta_batch_size=0)
    config = MetaConfig(eta=0.1, eta_schedule="step_decay")
    assert config.eta_at(0) == 0.1
    assert config.eta_at(9) == 0.1
    assert config.eta_at(10) == pytest.approx(0.09)
    assert config.eta_at(25) == pytest.approx(0.081)
    assert MetaConfig(eta=0.1).eta_at(1000) == 0.1


def test_adapt_zero_steps_returns_meta_parameter(cv, tasks):
    gamma_meta = init_params(cv.spec, sigma_init=0.1, seed=0)
    assert adapt(cv, gamma_meta, tasks[0].support, 0, UpdateRule("gd", 0.01)) is gamma_meta


def test_adapt_one_gd_step_matches_manual_update(cv, tasks):
    gamma_meta = init_params(cv.spec, sigma_init=0.1, seed=0)
    support = tasks[0].support
    adapted = adapt(cv, gamma_meta, support, 1, UpdateRule("gd", 0.05), lam=1e-3)
    manual = gamma_meta.flat() - 0.05 * autodiff.grad_params(loss_fn(cv, support, 1e-3), gamma_meta.flat())
    assert torch.allclose(adapted.flat(), manual, atol=1e-14)


def test_adapt_rejects_empty_support(cv):
    data = TaskDataset.from_arrays(np.full((2, 1), 0.5), np.zeros((2, 1)), [1.0, 2.0], support_size=0)
    with pytest.raises(EmptySetError):
        adapt(cv, init_params(cv.spec), data.support, 1, UpdateRule("gd", 0.1))


def test_neural_cv_gamma0_tracks_residual_mean(cv, tasks):
    data = tasks[1]
    m = len(data.support)
    params = train_neural_cv(cv, data, epochs=400, batch_size=m, rule=UpdateRule("gd", 0.05), sigma_init=0.0)
    support = data.support
    residual = support.values - stein_values(cv, params.weights, support.points, support.scores)
    assert params.gamma0 == pytest.approx(float(residual.mean()), abs=5e-3)


def test_neural_cv_is_seeded(cv, tasks):
    first = train_neural_cv(cv, tasks[2], epochs=3, seed=7)
    second = train_neural_cv(cv, tasks[2], epochs=3, seed=7)
    assert torch.equal(first.flat(), second.flat())
    untrained = train_neural_cv(cv, tasks[2], epochs=0, seed=7)
    assert untrained.gamma0 == pytest.approx(float(tasks[2].support.values.mean()))


def test_task_meta_gradient_modes(cv, tasks):
    task = tasks[0]
    gamma = init_params(cv.spec, sigma_init=0.2, seed=1).flat()
    inner, outer = loss_fn(cv, task.support), loss_fn(cv, task.query)

    _, exact = task_meta_gradient(cv, task, gamma, MetaConfig(inner_steps=2, alpha=0.05, grad_mode="exact"))
    assert torch.allclose(exact, autodiff.meta_grad_exact(inner, outer, gamma, 0.05, 2))

    _, approx = task_meta_gradient(cv, task, gamma, MetaConfig(inner_steps=2, alpha=0.05, grad_mode="first_order"))
    assert torch.allclose(approx, autodiff.meta_grad_first_order(inner, outer, gamma, 0.05, 2))

    _, zero_shot = task_meta_gradient(cv, task, gamma, MetaConfig(inner_steps=0))
    assert torch.allclose(zero_shot, autodiff.grad_params(outer, gamma))


def small_meta_config(**overrides):
    values = dict(
        inner_steps=1, alpha=0.01, eta=0.01, meta_batch_size=3, meta_iterations=12,
        grad_mode="first_order", inner_rule="adam", outer_rule="adam", seed=3,
    )
    values.update(overrides)
    return MetaConfig(**values)


def test_meta_train_trace_and_determinism(cv, tasks):
    config = small_meta_config()
    first = meta_train(lambda i: cv, tasks, cv.spec, config)
    second = meta_train(lambda i: cv, tasks, cv.spec, config)
    assert len(first.training_trace) == 12
    assert [row.iteration for row in first.training_trace] == list(range(12))
    assert all(np.isfinite(row.mean_outer_loss) and row.grad_norm_estimate >= 0 for row in first.training_trace)
    assert torch.equal(first.gamma_meta.flat(), second.gamma_meta.flat())
    assert first.gamma_meta.size == init_params(cv.spec).size


def test_parallel_inner_loops_do_not_change_result(cv, tasks):
    serial = meta_train(lambda i: cv, tasks, cv.spec, small_meta_config(workers=1))
    parallel = meta_train(lambda i: cv, tasks, cv.spec, small_meta_config(workers=3))
    assert torch.equal(serial.gamma_meta.flat(), parallel.gamma_meta.flat())


def test_meta_train_checkpoints_and_trace_file(cv, tasks, tmp_path):
    config = small_meta_config(checkpoint_every=5)
    result = meta_train(lambda i: cv, tasks, cv.spec, config, checkpoint_dir=tmp_path, metadata={"config_hash": "x"})
    assert sorted(p.name for p in tmp_path.glob("meta_*.pt")) == ["meta_000005.pt", "meta_000010.pt"]
    assert load_checkpoint(tmp_path / "meta_000010.pt").metadata["iteration"] == 10
    trace = pd.read_csv(tmp_path / "training_trace.csv")
    assert list(trace["iteration"]) == list(range(12))
    assert trace["mean_outer_loss"].to_numpy() == pytest.approx(result.trace_frame()["mean_outer_loss"].to_numpy(), rel=1e-9)


def test_meta_train_aborts_on_non_finite_gradient(cv, tasks, monkeypatch):
    def broken(cv, task, gamma, config):
        nan = torch.tensor(float("nan"), dtype=torch.float64)
        return nan, torch.full_like(gamma, float("nan"))

    monkeypatch.setattr(training, "task_meta_gradient", broken)
    with pytest.raises(NumericalAbort) as info:
        meta_train(lambda i: cv, tasks, cv.spec, small_meta_config())
    assert info.value.iteration == 0


def test_meta_train_rejects_empty_task_list(cv):
    with pytest.raises(EmptySetError):
        meta_train(lambda i: cv, [], cv.spec, small_meta_config())


def test_smoothed_trace_is_rolling_mean(cv):
    rows = [TraceRow(i, float(i), float(2 * i), 1.0) for i in range(6)]
    meta = MetaParameter(gamma_meta=init_params(cv.spec), training_trace=rows)
    smoothed = meta.smoothed("grad_norm_estimate", window=3)
    assert smoothed.tolist() == pytest.approx([0.0, 1.0, 2.0, 4.0, 6.0, 8.0])


@pytest.fixture
def many_tasks():
    records = sample_oscillatory_tasks(OscillatoryEnvironment(d=1), count=50, n_per_task=10, seed=5)
    return [record.dataset for record in records]


def test_small_gd_steps_do_not_increase_support_loss(cv, many_tasks):
    rule = UpdateRule("gd", 1e-4)
    checked = 0
    for index, task in enumerate(many_tasks[:20]):
        loss = loss_fn(cv, task.support)
        gamma = init_params(cv.spec, sigma_init=0.5, seed=index).flat()
        for _ in range(5):
            before = float(loss(gamma))
            gradient = autodiff.grad_params(loss, gamma)
            gamma, rule = update_step(rule, gamma, gradient)
            assert float(loss(gamma)) <= before or float(torch.linalg.norm(gradient)) < 1e-10
            checked += 1
    assert checked == 100


def test_adapt_does_not_increase_support_loss(cv, many_tasks):
    gamma_meta = init_params(cv.spec, sigma_init=0.3, gamma0_init=0.1, seed=9)
    for task in many_tasks:
        loss = loss_fn(cv, task.support)
        adapted = adapt(cv, gamma_meta, task.support, 2, UpdateRule("gd", 1e-3))
        assert float(loss(adapted.flat())) <= float(loss(gamma_meta.flat()))


def test_exact_meta_gradient_beats_first_order_against_finite_differences(cv, many_tasks):
    exact_config = MetaConfig(inner_steps=1, alpha=0.05, grad_mode="exact")
    first_order_config = MetaConfig(inner_steps=1, alpha=0.05, grad_mode="first_order")
    for index, task in enumerate(many_tasks[:20]):
        gamma = init_params(cv.spec, sigma_init=0.5, gamma0_init=0.2, seed=100 + index).flat()
        composed = autodiff.unrolled_objective(loss_fn(cv, task.support), loss_fn(cv, task.query), 0.05, 1)
        numeric = autodiff.finite_diff_grad(composed, gamma, step=1e-5)

        _, exact = task_meta_gradient(cv, task, gamma, exact_config)
        _, approx = task_meta_gradient(cv, task, gamma, first_order_config)
        exact_error = float(torch.linalg.norm(exact - numeric) / torch.linalg.norm(numeric))
        approx_error = float(torch.linalg.norm(approx - numeric) / torch.linalg.norm(numeric))
        assert exact_error <= 1e-4
        assert exact_error < approx_error


def test_single_zero_shot_iteration_is_plain_outer_step(cv, tasks):
    config = MetaConfig(inner_steps=0, eta=0.01, meta_batch_size=1, meta_iterations=1, outer_rule="gd", inner_rule="gd", seed=4)
    result = meta_train(lambda i: cv, tasks[:1], cv.spec, config)
    start = init_params(cv.spec, config.sigma_init, 0.0, config.seed).flat()
    expected = start - 0.01 * autodiff.grad_params(loss_fn(cv, tasks[0].query), start)
    assert torch.allclose(result.gamma_meta.flat(), expected, rtol=0.0, atol=1e-15)


def test_single_exact_iteration_uses_unrolled_gradient(cv, tasks):
    config = MetaConfig(
        inner_steps=1, alpha=0.05, eta=0.01, meta_batch_size=1, meta_iterations=1,
        grad_mode="exact", inner_rule="gd", outer_rule="gd", seed=4,
    )
    result = meta_train(lambda i: cv, tasks[:1], cv.spec, config)
    start = init_params(cv.spec, config.sigma_init, 0.0, config.seed).flat()
    direct = autodiff.meta_grad_exact(loss_fn(cv, tasks[0].support), loss_fn(cv, tasks[0].query), start, 0.05, 1)
    assert result.training_trace[0].grad_norm_estimate == pytest.approx(float(torch.linalg.vector_norm(direct)), abs=1e-12)
    assert torch.allclose(result.gamma_meta.flat(), start - 0.01 * direct, rtol=0.0, atol=1e-12)
