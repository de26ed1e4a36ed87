import numpy as np
import pytest
import torch

from modules.task_environments.ode import OdeEnvironment, OdeTask, ode_solve, ode_truth, sample_ode_tasks
from modules.task_environments.oscillatory import (
    OscillatoryEnvironment,
    OscillatoryTask,
    oscillatory_truth,
    sample_oscillatory_tasks,
)
from modules.task_environments.records import task_rng, task_seed
from modules.task_environments.task_bundle import read_task_bundle, write_task_bundle


def test_oscillatory_truth_matches_tensor_quadrature():
    a = (0.47, 4.3, 5.8)
    t, w = np.polynomial.legendre.leggauss(30)
    x, w = (t + 1.0) / 2.0, w / 2.0
    grid = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
    weights = np.outer(w, w).reshape(-1)
    expected = float(OscillatoryTask(a)(grid) @ weights)
    truth = oscillatory_truth(a, d=2)
    assert truth.value == pytest.approx(expected, abs=1e-8)
    assert truth.method == "analytic"


@pytest.mark.parametrize("d", [1, 2, 3])
def test_oscillatory_truth_over_many_tasks(d):
    t, w = np.polynomial.legendre.leggauss(30)
    x, w = (t + 1.0) / 2.0, w / 2.0
    grid = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1).reshape(-1, d)
    weights = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    env = OscillatoryEnvironment(d=d)
    rng = np.random.default_rng(d)
    for _ in range(100):
        task = env.draw(rng)
        assert oscillatory_truth(task.a, d).value == pytest.approx(float(task(grid) @ weights), abs=1e-8)


def test_oscillatory_truth_with_zero_frequency():
    # при b = 0 множитель вырождается в 1
    assert oscillatory_truth((0.25, 0.0), d=1).value == pytest.approx(np.cos(np.pi / 2), abs=1e-15)
    assert oscillatory_truth((0.0, 0.0, 0.0), d=2).value == 1.0
    with pytest.raises(ValueError):
        oscillatory_truth((0.5, 5.0), d=2)


def test_oscillatory_sampling_is_deterministic_and_prefix_independent():
    env = OscillatoryEnvironment(d=2)
    five = sample_oscillatory_tasks(env, count=5, n_per_task=8, seed=3)
    three = sample_oscillatory_tasks(env, count=3, n_per_task=8, seed=3)
    for short, long in zip(three, five):
        assert short.params == long.params
        assert torch.equal(short.dataset.points, long.dataset.points)
        assert short.truth == long.truth


def test_oscillatory_tasks_live_on_unit_cube():
    env = OscillatoryEnvironment(d=3)
    for record in sample_oscillatory_tasks(env, count=4, n_per_task=12, seed=0):
        data = record.dataset
        assert data.points.shape == (12, 3)
        assert float(data.points.min()) >= 0.0 and float(data.points.max()) <= 1.0
        assert torch.count_nonzero(data.scores) == 0
        assert 0.4 <= record.params[0] <= 0.6
        assert all(4.0 <= b <= 6.0 for b in record.params[1:])
        assert torch.allclose(data.values, torch.from_numpy(OscillatoryTask(record.params)(data.points.numpy())))


def test_train_and_test_streams_are_disjoint():
    env = OscillatoryEnvironment(d=1)
    train = sample_oscillatory_tasks(env, count=3, n_per_task=4, seed=1, namespace="train")
    test = sample_oscillatory_tasks(env, count=3, n_per_task=4, seed=1, namespace="test")
    assert {r.params for r in train}.isdisjoint({r.params for r in test})
    with pytest.raises(ValueError):
        task_rng(1, "validation", 0)
    with pytest.raises(ValueError):
        task_seed(1, "validation", 0)


def test_task_seed_is_stable_and_distinct():
    assert task_seed(0, "test", 4) == task_seed(0, "test", 4)
    seeds = {task_seed(0, namespace, index) for namespace in ("train", "test") for index in range(20)}
    assert len(seeds) == 40
    assert all(0 <= seed < 2 ** 31 for seed in seeds)


def test_ode_truth_for_constant_coefficient():
    # c ≡ 1: u = 25 s(1 − s), ∫u ds = 25/6
    truth = ode_truth(0.0)
    assert truth.value == pytest.approx(25.0 / 6.0, rel=1e-6)
    assert truth.method == "quadrature_oracle"
    assert truth.resolution == 8192
    assert truth.error_estimate < 1e-6


def test_ode_solve_is_quadratic_in_x():
    assert ode_solve(0.6, 2.0, 64) == pytest.approx(4.0 * ode_solve(0.6, 1.0, 64), rel=1e-14)
    assert ode_solve(0.6, 0.0, 64) == 0.0
    # с ростом a коэффициент c растёт, прогиб уменьшается
    assert ode_solve(1.0, 1.0, 64) < ode_solve(0.0, 1.0, 64)
    with pytest.raises(ValueError):
        ode_solve(0.3, 1.0, 1)


def test_ode_grid_converges_at_second_order():
    # при c ≡ 1 узловые значения точны, остаётся ошибка трапеций O(h²)
    errors = [abs(ode_solve(0.0, 1.0, n_s) - 25.0 / 6.0) for n_s in (64, 128, 256)]
    for coarse, fine in zip(errors[:-1], errors[1:]):
        assert 3.5 <= coarse / fine <= 4.5
    truth = ode_truth(0.7).value
    assert abs(ode_solve(0.7, 1.0, 64) - truth) < abs(ode_solve(0.7, 1.0, 16) - truth)


def test_ode_truth_decreases_with_stiffness():
    env = OdeEnvironment()
    values = [ode_truth(a).value for a in np.linspace(*env.a_range, 20)]
    assert all(later < earlier for earlier, later in zip(values[:-1], values[1:]))


def test_ode_truth_is_converged_at_default_resolution():
    assert abs(ode_truth(0.5, 16384).value - ode_truth(0.5).value) <= 1e-6


def test_sample_ode_tasks():
    env = OdeEnvironment(n_s=32, n_s_truth=256)
    records = sample_ode_tasks(env, count=3, n_per_task=6, seed=2)
    for record in records:
        data = record.dataset
        assert record.kind == "ode"
        assert 0.0 <= record.params[0] <= 1.0
        assert torch.equal(data.scores, -data.points)
        expected = OdeTask(record.params[0], n_s=32)(data.points.numpy())
        assert data.values.numpy() == pytest.approx(expected, rel=1e-14)
        assert record.truth.resolution == 256
        assert record.truth.error_estimate is not None


def test_bundle_round_trip_is_bit_exact(tmp_path):
    records = sample_oscillatory_tasks(OscillatoryEnvironment(d=2), count=3, n_per_task=6, seed=5, namespace="test")
    records += sample_ode_tasks(OdeEnvironment(n_s=16, n_s_truth=64), count=2, n_per_task=4, seed=5)
    path = write_task_bundle(tmp_path / "tasks" / "bundle.jsonl", records)
    restored = read_task_bundle(path)
    assert len(restored) == len(records)
    for original, loaded in zip(records, restored):
        assert (loaded.kind, loaded.index, loaded.namespace, loaded.params) == (
            original.kind, original.index, original.namespace, original.params,
        )
        assert loaded.truth == original.truth
        assert loaded.dataset.support_size == original.dataset.support_size
        assert torch.equal(loaded.dataset.points, original.dataset.points)
        assert torch.equal(loaded.dataset.values, original.dataset.values)


def test_malformed_bundle_line_reports_location(tmp_path):
    records = sample_oscillatory_tasks(OscillatoryEnvironment(d=1), count=1, n_per_task=4, seed=0)
    path = write_task_bundle(tmp_path / "bundle.jsonl", records)
    with open(path, "a", encoding="utf-8") as file:
        file.write('{"schema_version": 1, "kind": "ode"}\n')
    with pytest.raises(ValueError, match=":2"):
        read_task_bundle(path)


def test_oscillatory_truth_over_full_period():
    assert oscillatory_truth((0.5, 2.0 * np.pi), d=1).value == pytest.approx(0.0, abs=1e-12)


def test_ode_solve_against_constant_coefficient_solution():
    assert ode_solve(0.0, 1.0, 256) == pytest.approx(25.0 / 6.0, rel=1e-4)
    assert ode_solve(0.0, 0.5, 256) == pytest.approx(25.0 / 24.0, rel=1e-4)
