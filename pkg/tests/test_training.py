import dataclasses
import decimal

import numpy as np
import pytest

from conftest import gradient_errors, random_example, random_model
from latticeagg.errors import ConfigError, DivergenceError, LabelError
from latticeagg.model import ExampleSet, init_model, init_model_from_examples
from latticeagg.training import (
    Candidate,
    TrainConfig,
    backprop,
    batch_gradient,
    check_feasible,
    loss,
    project_all,
    train,
    tune,
)


def max_task(rng, n, sigma=0.05):
    examples = []
    for _ in range(n):
        M = int(rng.integers(1, 6))
        tokens = rng.uniform(-1, 1, size=(M, 2))
        y = float(tokens[:, 0].max() + rng.normal(scale=sigma))
        examples.append(ExampleSet(tokens=tokens, label=y))
    return examples


def test_loss_examples():
    assert loss(3.0, 3.0, "squared_error") == 0.0
    assert loss(0.0, 1.0, "logistic_pm1") == pytest.approx(np.log(2), abs=1e-15)
    decimal.getcontext().prec = 50
    oracle = float((1 + decimal.Decimal(1000).exp()).ln())
    assert loss(1000.0, -1.0, "logistic_pm1") == oracle == 1000.0
    assert loss(-1000.0, -1.0, "logistic_pm1") == 0.0
    with pytest.raises(LabelError):
        loss(0.0, 0.5, "logistic_pm1")


def test_zero_init_zero_label_gradient_is_zero(rng):
    model = init_model(3, 2)
    value, bundle = backprop(model, random_example(rng, 3), label=0.0)
    assert value == 0.0
    assert not np.any(bundle.flat)
    assert set(bundle.arrays()) == {name for name, _ in model.param_layout()}


@pytest.mark.parametrize("kind", ["squared_error", "logistic_pm1"])
def test_gradient_matches_finite_differences(rng, kind):
    for _ in range(10):
        model = random_model(rng, D=2, K=2, scale=0.6)
        examples = [random_example(rng, 2, missing_rate=0.15, label=float(rng.choice([-1, 1])))
                    for _ in range(3)]
        errs = gradient_errors(model, examples, kind)
        assert errs.size > model.flatten().size // 2
        assert errs.max() < 1e-4


def test_duplicated_token_gradient(rng):
    model = random_model(rng, D=2, K=1, scale=0.6)
    tok = rng.uniform(-1, 1, size=(1, 2))
    _, once = backprop(model, ExampleSet(tokens=tok, label=0.3))
    _, twice = backprop(model, ExampleSet(tokens=np.vstack([tok, tok]), label=0.3))
    np.testing.assert_allclose(twice.flat, once.flat, atol=1e-15)


def test_l2_penalty_gradient(rng):
    model = random_model(rng, D=2, K=1)
    ex = [random_example(rng, 2)]
    base, _, g0 = batch_gradient(model, ex, "squared_error")
    pen, _, g1 = batch_gradient(model, ex, "squared_error", l2_penalty=0.1)
    theta = model.flatten()
    assert pen == pytest.approx(base + 0.1 * theta @ theta)
    np.testing.assert_allclose(g1 - g0, 0.2 * theta)


def test_zero_epochs_returns_projected_init(rng):
    model = init_model(2, 1)
    result = train(model, max_task(rng, 10), TrainConfig(epochs=0))
    assert result.trace == []
    np.testing.assert_array_equal(result.model.flatten(), model.flatten())


def test_training_is_deterministic_and_feasible(rng):
    data = max_task(rng, 300)
    model = init_model_from_examples(data, K=1, feature_monotonicity=["increasing", "none"])
    cfg = TrainConfig(epochs=6, batch_size=16, seed=3, projection_period=3)
    a = train(model, data, cfg)
    b = train(model, data, cfg)
    assert [r.mean_loss for r in a.trace] == [r.mean_loss for r in b.trace]
    np.testing.assert_array_equal(a.model.flatten(), b.model.flatten())
    check_feasible(a.model, tol=1e-12)
    assert a.trace[5].mean_loss < a.trace[0].mean_loss
    for x, y in zip(a.batch_orders, b.batch_orders):
        np.testing.assert_array_equal(x, y)


def test_training_with_validation_metric(rng, tmp_path):
    data = max_task(rng, 100)
    model = init_model_from_examples(data, K=1)
    result = train(model, data[:80], TrainConfig(epochs=2), validation=data[80:], metric="mse")
    assert all(r.validation_metric is not None for r in result.trace)
    path = tmp_path / "trace.csv"
    result.write_trace_csv(path)
    assert path.read_text().splitlines()[0] == "epoch,mean_loss,validation_metric"


def test_divergence_raises_with_step(rng):
    data = max_task(rng, 20)
    bad = [dataclasses.replace(ex, label=float("inf")) for ex in data]
    with pytest.raises(DivergenceError) as info:
        train(init_model(2, 1), bad, TrainConfig(epochs=1, batch_size=4))
    assert info.value.step == 1


def test_project_all_componentwise(rng):
    model = random_model(rng, D=2, K=1)
    np.testing.assert_array_equal(project_all(model).flatten(), model.flatten())
    cal = model.phi_calibrators[0][1]
    broken_cal = cal.replace(values=np.linspace(0.9, 0.1, cal.values.size))
    broken = dataclasses.replace(model, phi_calibrators=[[model.phi_calibrators[0][0], broken_cal]])
    fixed = project_all(broken)
    assert fixed.is_feasible()
    before, after = broken.flatten(), fixed.flatten()
    changed = np.flatnonzero(before != after)
    layout = model.param_layout()
    starts = np.cumsum([0] + [size for _, size in layout])
    idx = [i for i, (name, _) in enumerate(layout) if name.startswith("phi_cal[0][1]")]
    lo, hi = starts[idx[0]], starts[idx[-1] + 1]
    assert changed.size and np.all((changed >= lo) & (changed < hi))


def test_random_perturbed_models_project_feasible(rng):
    for _ in range(50):
        model = random_model(rng, D=3, K=2, scale=3.0)
        assert model.violations() == 0.0


def test_tune_selects_sane_candidate(rng):
    data = max_task(rng, 200)
    train_set, valid = data[:150], data[150:]
    cands = [Candidate(TrainConfig(learning_rate=1e9, epochs=2)), Candidate(TrainConfig(learning_rate=0.1, epochs=2))]
    result = tune(cands, train_set, valid, "mse")
    assert result.best_index == 1
    assert len(result.report) == 2
    one = tune(cands[1:], train_set, valid, "mse")
    assert one.best_index == 0
    with pytest.raises(ConfigError):
        tune([], train_set, valid, "mse")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss_kind="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    assert TrainConfig.from_dict({"epochs": 3, "unknown": 1}).epochs == 3
