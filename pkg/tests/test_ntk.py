import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from distill_lab.errors import DomainError, ShapeError
from distill_lab.nn import Activation, MlpModel, MlpSpec, init_model
from distill_lab.ntk import (MAX_PROBES, GramMatrix, NtkSettings, ProjectionStep, ProjectionTrace,
                             compute_gram, gram_drift, gram_from_jacobian, probe_problem,
                             rate_ordering_report, run_descent, run_ntk_analysis,
                             stability_warning, trace_projections)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _linear_model(d, seed=0):
    spec = MlpSpec(d, (), 1, use_bias=False)
    weights = np.random.default_rng(seed).normal(size=(d, 1))
    return MlpModel(spec, [weights], [np.zeros(0)])


def _trace(index, eigenvalue, projections):
    steps = [ProjectionStep(t, p, p) for t, p in enumerate(projections)]
    return ProjectionTrace(index, eigenvalue, steps)


def test_linear_gram_is_the_probe_inner_product():
    x = np.random.default_rng(0).normal(size=(7, 4))
    gram = compute_gram(_linear_model(4), x)
    np.testing.assert_allclose(gram.matrix, x @ x.T, atol=1e-12)
    assert gram.sample_ids == tuple(range(7))


def test_orthonormal_probes_give_identity():
    q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(5, 5)))
    gram = compute_gram(_linear_model(5), q[:3])
    np.testing.assert_allclose(gram.matrix, np.eye(3), atol=1e-12)


@given(seeds)
@settings(max_examples=10)
def test_random_network_gram_is_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    model = init_model(MlpSpec(3, (12, 6), 1, Activation.TANH), seed)
    gram = compute_gram(model, rng.normal(size=(9, 3)))
    assert gram.asymmetry() <= 1e-10
    eigenvalues = gram.eigen().eigenvalues
    assert eigenvalues[-1] >= -1e-8 * max(1.0, eigenvalues[0])


@pytest.mark.parametrize("spec, unit", [
    (MlpSpec(3, (6, 5), 1, Activation.TANH), None),
    (MlpSpec(3, (6,), 1, Activation.RELU), None),
    (MlpSpec(3, (4, 4), 3, Activation.TANH), 1),
    (MlpSpec(3, (5,), 2, Activation.RELU, use_bias=False), 0),
])
def test_efficient_gram_matches_jacobian(spec, unit):
    rng = np.random.default_rng(4)
    model = init_model(spec, 4)
    model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
    probes = rng.normal(size=(8, 3))
    fast = compute_gram(model, probes, unit)
    oracle = gram_from_jacobian(model, probes, unit)
    np.testing.assert_allclose(fast.matrix, oracle.matrix, atol=1e-10)
    assert fast.output_unit == oracle.output_unit


def test_multi_output_head_needs_a_unit():
    model = init_model(MlpSpec(3, (4,), 3), 0)
    probes = np.zeros((2, 3))
    with pytest.raises(DomainError):
        compute_gram(model, probes)
    with pytest.raises(DomainError):
        compute_gram(model, probes, output_unit=3)
    assert compute_gram(model, probes, output_unit=2).output_unit == 2


def test_probe_validation():
    model = _linear_model(3)
    with pytest.raises(ShapeError):
        compute_gram(model, np.zeros((2, 4)))
    with pytest.raises(DomainError):
        compute_gram(model, np.zeros((MAX_PROBES + 1, 3)))


def test_linear_descent_follows_the_eigen_law():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 5))
    y = rng.normal(size=20)
    model = _linear_model(5, seed=3)
    lambda_max = np.linalg.eigvalsh(x @ x.T)[-1]
    run = run_descent(model, x, y, 0.9 / lambda_max, 100)
    r0 = run.residual_norms[0]
    for trace in run.traces:
        for step in trace.steps:
            assert abs(step.projection - step.predicted) <= 1e-10 * max(1.0, r0)
    assert not run.warnings


def test_null_directions_keep_their_projection():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 3))
    traces = trace_projections(_linear_model(3), x, rng.normal(size=10), 0.01, 30)
    for trace in traces[3:]:
        assert abs(trace.eigenvalue) < 1e-8
        projections = [step.projection for step in trace.steps]
        np.testing.assert_allclose(projections, projections[0], atol=1e-10)


def test_residual_norms_do_not_increase_below_the_stability_limit():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(12, 4))
    lambda_max = np.linalg.eigvalsh(x @ x.T)[-1]
    run = run_descent(_linear_model(4), x, rng.normal(size=12), 0.9 / lambda_max, 40)
    norms = run.residual_norms
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_large_step_size_warns():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 3))
    lambda_max = np.linalg.eigvalsh(x @ x.T)[-1]
    run = run_descent(_linear_model(3), x, rng.normal(size=6), 2.5 / lambda_max, 5)
    assert len(run.warnings) == 1
    assert stability_warning(0.1, 1.0) is None
    assert stability_warning(2.0, 1.0) is not None


def test_descent_does_not_touch_the_input_model():
    model = _linear_model(3)
    before = model.parameter_bytes()
    run = run_descent(model, np.eye(3), np.ones(3), 0.1, 3)
    assert model.parameter_bytes() == before
    assert run.final_model.parameter_bytes() != before


def test_descent_validation():
    model = _linear_model(3)
    with pytest.raises(ShapeError):
        run_descent(model, np.eye(3), np.ones(2), 0.1, 3)
    with pytest.raises(DomainError):
        run_descent(model, np.eye(3), np.ones(3), 0.1, -1)


def test_linear_model_has_no_rate_inversions():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(8, 8))
    lambda_max = np.linalg.eigvalsh(x @ x.T)[-1]
    traces = trace_projections(_linear_model(8), x, rng.normal(size=8), 0.9 / lambda_max, 200)
    report = rate_ordering_report(traces)
    assert report.n_inversions == 0
    assert report.within_tolerance
    assert report.fastest_index == 0


def test_half_life_interpolates_in_log_space():
    trace = _trace(0, 1.0, [2.0 ** (-t / 2) for t in range(6)])
    assert trace.half_life() == pytest.approx(2.0)
    assert _trace(0, 1.0, [1.0, 0.9, 0.8]).half_life() == math.inf
    assert _trace(0, 1.0, [0.0, 0.0]).half_life() is None
    assert _trace(0, 1.0, [1.0, 0.0]).half_life() == pytest.approx(0.5)


def test_rate_ordering_flags_inversions_and_ties():
    slow_large = _trace(0, 2.0, [1.0, 0.9, 0.8, 0.7, 0.6, 0.5])
    fast_small = _trace(1, 1.0, [1.0, 0.25])
    report = rate_ordering_report([fast_small, slow_large])
    assert report.inversions == [(0, 1)]
    assert not report.within_tolerance
    assert rate_ordering_report([fast_small, slow_large], allowed_inversions=1).within_tolerance
    assert report.fastest_index == 1

    tied = rate_ordering_report([_trace(0, 1.0, [1.0, 0.9, 0.1]),
                                 _trace(1, 1.0 + 1e-12, [1.0, 0.2])])
    assert tied.ties == [(0, 1)]
    assert tied.n_inversions == 0

    stalled = rate_ordering_report([_trace(0, 2.0, [1.0, 0.9]), _trace(1, 1.0, [1.0, 0.95])])
    assert stalled.ties == [(0, 1)]


def test_gram_drift():
    base = GramMatrix(np.eye(2), (0, 1))
    assert gram_drift(base, GramMatrix(np.eye(2), (0, 1))) == 0.0
    moved = GramMatrix(np.eye(2) * 1.1, (0, 1))
    assert gram_drift(base, moved) == pytest.approx(0.1)
    assert gram_drift(GramMatrix(np.zeros((2, 2)), (0, 1)), moved) == 0.0


def test_settings_round_trip_and_validation():
    ntk = NtkSettings(hidden_dims=(32,), n_probes=5, output_unit=None)
    assert NtkSettings.from_dict(ntk.to_dict()) == ntk
    with pytest.raises(DomainError):
        NtkSettings.from_dict({"width": 3})
    with pytest.raises(DomainError):
        NtkSettings(n_probes=MAX_PROBES + 1)
    with pytest.raises(DomainError):
        NtkSettings(eta=0.0)


def test_probe_problem_is_seeded():
    ntk = NtkSettings(input_dim=3, hidden_dims=(4,), n_probes=5)
    a, b = probe_problem(ntk), probe_problem(ntk)
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].parameter_bytes() == b[0].parameter_bytes()


def test_small_analysis_report_is_json_ready():
    ntk = NtkSettings(input_dim=3, hidden_dims=(16,), n_probes=6, steps=10)
    report = run_ntk_analysis(ntk)
    data = json.loads(json.dumps(report.to_dict()))
    assert len(data['gram_eigenvalues']) == 6
    assert len(data['residual_norms']) == 11
    assert data['gram_drift'] >= 0.0
    assert report.eta == pytest.approx(0.5 / report.eigenvalues[0])
    assert data['rate_ordering']['n_inversions'] == report.ordering.n_inversions


def test_analysis_of_a_classifier_head():
    ntk = NtkSettings(input_dim=3, hidden_dims=(8,), output_dim=3, n_probes=4, steps=3)
    with pytest.raises(DomainError):
        run_ntk_analysis(ntk)
    report = run_ntk_analysis(NtkSettings.from_dict(dict(ntk.to_dict(), output_unit=2)))
    assert len(report.traces) == 4


@pytest.mark.slow
def test_wide_network_tracks_the_kernel_prediction():
    report = run_ntk_analysis(NtkSettings())
    assert report.wide_net_ok
    assert report.drift < 0.1


@given(st.integers(min_value=0, max_value=2**16))
@settings(max_examples=25)
def test_gram_spectrum_of_a_small_hidden_layer(seed):
    ntk = NtkSettings(input_dim=3, hidden_dims=(16,), n_probes=5, seed=seed)
    model, probes, _ = probe_problem(ntk)
    gram = compute_gram(model, probes)
    reference = np.sort(np.linalg.eigvalsh(gram.matrix))[::-1]
    np.testing.assert_allclose(gram.eigen().eigenvalues, reference,
                               atol=1e-9 * gram.frobenius())
