import math

import numpy as np
import pytest

from conftest import random_example, random_model
from latticeagg.errors import ConfigError, MissingToken, MissingValueUnsupported, ShapeError
from latticeagg.lattice_core import calibrate, interpolate
from latticeagg.model import (
    AggModel,
    ExampleSet,
    average_phi,
    explain,
    export_calibrator_curves,
    export_token_scores,
    format_explanation,
    forward,
    forward_batch,
    init_model,
    init_model_from_examples,
    phi_forward,
    quantile_keypoints,
)


def manual_quantile(values, q):
    """Linear interpolation between order statistics (type 7)."""
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def scalar_forward(model, tokens):
    """Forward pass written with the scalar lattice-core entry points only."""
    phis = []
    for tok in tokens:
        phi = []
        for k in range(model.K):
            cal = [calibrate(model.phi_calibrators[k][d], None if np.isnan(v) else float(v))
                   for d, v in enumerate(tok)]
            phi.append(interpolate(model.phi_lattices[k], cal))
        phis.append(phi)
    mean = np.mean(np.array(phis), axis=0)
    u = [calibrate(model.rho_calibrators[k], float(mean[k])) for k in range(model.K)]
    return calibrate(model.output_calibrator, interpolate(model.rho_lattice, u))


def test_init_forward_is_zero(rng):
    model = init_model(3, 2)
    for _ in range(20):
        assert forward(model, random_example(rng, 3)) == 0.0
    np.testing.assert_array_equal(phi_forward(model, [0.1, 0.2, 0.3]), [0.0, 0.0])


def test_init_param_counts():
    model = init_model(3, 2, lattice_size=2)
    assert [lat.params.size for lat in model.phi_lattices] == [8, 8]
    assert model.is_feasible()


def test_quantile_keypoints_match_oracle(rng):
    values = rng.uniform(0, 10, size=100)
    kp = quantile_keypoints(values, 5)
    expect = [manual_quantile(values, q) for q in np.linspace(0, 1, 5)]
    np.testing.assert_allclose(kp, expect, rtol=0, atol=1e-12)
    np.testing.assert_allclose(kp, [0, 2.5, 5, 7.5, 10], atol=1.5)


def test_quantile_keypoints_reduce_with_warning():
    with pytest.warns(UserWarning):
        kp = quantile_keypoints([1, 1, 1, 2, 2], 5)
    assert kp.tolist() == [1.0, 2.0]


def test_forward_matches_scalar_composition(rng):
    for _ in range(50):
        model = random_model(rng, D=3, K=2)
        ex = random_example(rng, 3, missing_rate=0.2)
        assert forward(model, ex) == pytest.approx(scalar_forward(model, ex.tokens), abs=1e-12)


def test_forward_batch_matches_forward(rng):
    model = random_model(rng, D=2, K=3)
    examples = [random_example(rng, 2) for _ in range(30)]
    batch = forward_batch(model, examples, chunk_size=7)
    assert batch.tolist() == [forward(model, ex) for ex in examples]


def test_layer_ranges(rng):
    for _ in range(50):
        model = random_model(rng, D=3, K=2)
        ex = random_example(rng, 3)
        report = explain(model, ex)
        assert all(-1 <= v <= 1 for rec in report["tokens"] for v in rec["phi"])
        assert all(-1 <= v <= 1 for v in report["mean"])
        assert all(0 <= v <= 1 for v in report["rho_calibrated"])
        assert -1 <= report["rho_lattice"] <= 1


def test_permutation_and_duplication(rng):
    for _ in range(50):
        model = random_model(rng, D=3, K=2)
        ex = random_example(rng, 3, M=5)
        base = forward(model, ex)
        for _ in range(5):
            shuffled = ExampleSet(tokens=ex.tokens[rng.permutation(5)], label=ex.label)
            assert forward(model, shuffled) == base
        doubled = ExampleSet(tokens=np.vstack([ex.tokens, ex.tokens]), label=ex.label)
        assert forward(model, doubled) == pytest.approx(base, abs=1e-12)


def test_missing_values(rng):
    model = random_model(rng, D=2, K=1)
    out = forward(model, ExampleSet(tokens=[[np.nan, np.nan]]))
    assert math.isfinite(out)
    strict = init_model(2, 1, missing_values=False)
    with pytest.raises(MissingValueUnsupported):
        forward(strict, ExampleSet(tokens=[[np.nan, 0.5]]))


def test_shape_errors():
    model = init_model(3, 1)
    with pytest.raises(ShapeError):
        forward(model, ExampleSet(tokens=[[0.0, 1.0]]))
    with pytest.raises(ShapeError):
        ExampleSet(tokens=np.zeros((0, 3)))


def test_explain_consistency(rng):
    model = random_model(rng, D=3, K=2)
    ex = random_example(rng, 3, M=4)
    report = explain(model, ex)
    assert report["output"] == forward(model, ex)
    phis = [rec["phi"] for rec in report["tokens"]]
    assert report["mean"] == average_phi(phis).tolist()
    assert explain(model, ex) == report
    single = ExampleSet(tokens=ex.tokens[:1])
    rep1 = explain(model, single)
    assert rep1["mean"] == rep1["tokens"][0]["phi"]
    text = format_explanation(report)
    assert text.splitlines()[-1].startswith("output: ")
    assert len(text.splitlines()) == 4 + 2


def test_mean_stage_arithmetic():
    np.testing.assert_allclose(average_phi([[-0.005], [-0.156], [0.075]]), [-0.028666666666666667], atol=1e-15)


def test_token_scores_match_forward(rng):
    model = random_model(rng, D=3, K=1)
    examples = [random_example(rng, 3, missing_rate=0.1) for _ in range(50)]
    universe = [tok for ex in examples for tok in ex.tokens]
    table = export_token_scores(model, universe)
    assert len(table) == len({tuple(np.nan_to_num(t, nan=np.inf)) for t in universe})
    for ex in examples:
        assert abs(table.score(ex) - forward(model, ex)) <= 1e-12
    with pytest.raises(MissingToken):
        table.lookup([9.0, 9.0, 9.0])
    with pytest.raises(ConfigError):
        export_token_scores(init_model(3, 2), universe)


def test_calibrator_curves(rng):
    model = init_model(3, 2)
    curves = export_calibrator_curves(model)
    assert len(curves) == 3 * 2 + 2 + 1
    out = [c for c in curves if c["layer"] == 6][0]
    assert out["keypoints"][0] == -1 and out["keypoints"][-1] == 1
    np.testing.assert_allclose(out["values"], out["keypoints"])
    trained = random_model(rng, D=3, K=2)
    for c in export_calibrator_curves(trained):
        assert np.all(np.diff(c["values"]) >= 0)


def test_monotone_directions(rng):
    model = random_model(rng, D=2, K=2, monotonicity=["increasing", "decreasing"])
    for _ in range(500):
        ex = random_example(rng, 2, M=3)
        m = int(rng.integers(3))
        up = ex.tokens.copy()
        up[m, 0] += rng.uniform(0, 2)
        down = ex.tokens.copy()
        down[m, 1] += rng.uniform(0, 2)
        base = forward(model, ex)
        assert forward(model, ExampleSet(tokens=up)) >= base - 1e-12
        assert forward(model, ExampleSet(tokens=down)) <= base + 1e-12


def test_save_load_round_trip(tmp_path, rng):
    model = random_model(rng, D=3, K=2)
    path = tmp_path / "model.json"
    model.save(path)
    back = AggModel.load(path)
    np.testing.assert_array_equal(back.flatten(), model.flatten())
    assert back.feature_monotonicity == model.feature_monotonicity
    ex = random_example(rng, 3)
    assert forward(back, ex) == forward(model, ex)


def test_flatten_unflatten(rng):
    model = random_model(rng, D=2, K=2)
    theta = model.flatten()
    np.testing.assert_array_equal(model.unflatten(theta).flatten(), theta)


def test_init_from_examples_uses_quantiles(rng):
    examples = [ExampleSet(tokens=rng.uniform(0, 10, size=(4, 2))) for _ in range(25)]
    model = init_model_from_examples(examples, K=1, num_keypoints=3)
    col = np.vstack([ex.tokens for ex in examples])[:, 1]
    np.testing.assert_allclose(model.phi_calibrators[0][1].keypoints,
                               [manual_quantile(col, q) for q in (0, 0.5, 1)], atol=1e-12)
