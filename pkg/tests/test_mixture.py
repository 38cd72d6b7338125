import numpy as np
import pandas as pd
import pytest

from src.errors import EstimationError
from src.estimation import fit_mple
from src.evaluation import adjusted_rand
from src.mixture import (CemControls, MixtureFit, canonicalize, class_log_pseudolik, e_step,
                         expand_design, fit_cem)
from src.monitoring import monitor
from src.network import CovariateTable
from src.sampler import SamplerControls, plant_classes, simulate
from src.terms import LabelAssignment, ModelSpec, TermSpec, design_matrix


@pytest.fixture
def planted_network(rng, make_covariates):
    """40 nodes, 30/10 classes with very different sender activity."""
    cov = make_covariates(rng, 40)
    spec = ModelSpec((TermSpec('edges', heterogeneous=True), TermSpec('mutual'),
                      TermSpec('sendercov', 'level')), n_classes=2)
    planted = plant_classes(40, (0.75, 0.25), seed=12)
    # layout: mutual, sendercov.level, edges:class1, edges:class2
    net = simulate(spec, cov, [1.5, 0.3, -3.0, -0.5], planted,
                   SamplerControls.for_network(40, seed=13))[0]
    return net, cov, spec, planted


@pytest.fixture
def planted_receivers():
    """40 nodes; class 2 receivers draw far more incoming ties."""
    cov = CovariateTable.empty(40)
    spec = ModelSpec((TermSpec('edges', heterogeneous=True),), n_classes=2, mode='receiver')
    planted = plant_classes(40, (0.75, 0.25), seed=22)
    net = simulate(spec, cov, [-3.0, -0.5], planted, SamplerControls.for_network(40, seed=23))[0]
    return net, cov, spec, planted


def test_expand_design_layout(rng, make_network, make_covariates):
    cov = make_covariates(rng, 6)
    net = make_network(rng, 6, 0.4)
    hom = ModelSpec((TermSpec('edges'), TermSpec('sendercov', 'level')))
    d = design_matrix(net, cov, hom)
    np.testing.assert_array_equal(expand_design(d, hom, LabelAssignment.single_class(6)), d.X)

    spec = hom.with_heterogeneous(['sendercov.level'], 2)
    labels = LabelAssignment.from_labels([0, 1, 0, 0, 1, 0], 2)
    X = expand_design(d, spec, labels)
    assert X.shape == (30, 1 + 2 * 1)
    node1 = d.senders == 1
    np.testing.assert_array_equal(X[node1, 1], 0.0)
    np.testing.assert_array_equal(X[node1, 2], d.X[node1, 1])


def test_e_step_symmetric_parameters(rng, make_network):
    net = make_network(rng, 8, 0.3)
    cov = CovariateTable.empty(8)
    spec = ModelSpec((TermSpec('edges', heterogeneous=True),), n_classes=2)
    assignment, posterior = e_step(net, cov, spec, [-1.0, -1.0], [0.5, 0.5])
    np.testing.assert_allclose(posterior, 0.5)
    assert assignment.labels.tolist() == [0] * 8
    assert assignment.empty_classes() == [1]
    _, posterior = e_step(net, cov, spec, [-1.0, -1.0], [0.99, 0.01])
    np.testing.assert_allclose(posterior, np.tile([0.99, 0.01], (8, 1)))


def test_e_step_recovers_planted_classes(planted_network):
    net, cov, spec, planted = planted_network
    _, posterior = e_step(net, cov, spec, [1.5, 0.3, -3.0, -0.5], planted.alpha)
    assert posterior[np.arange(40), planted.labels].mean() >= 0.95


def test_e_step_receiver_mode(planted_receivers):
    net, cov, spec, planted = planted_receivers
    _, posterior = e_step(net, cov, spec, [-3.0, -0.5], planted.alpha)
    assert posterior[np.arange(40), planted.labels].mean() >= 0.95


def test_cem_receiver_mode_recovers_classes(planted_receivers):
    net, cov, spec, planted = planted_receivers
    fit = fit_cem(net, cov, spec, CemControls(n_starts=5, seed=6, refine=False))
    assert adjusted_rand(planted.labels, fit.labels) >= 0.9
    # canonical order puts the large, sparse class first
    assert fit.theta[0] < fit.theta[1]


def test_reported_theta_belongs_to_reported_labels(planted_network):
    net, cov, spec, _ = planted_network
    fit = fit_cem(net, cov, spec, CemControls(n_starts=1, max_iter=1, seed=9, refine=False))
    assert not fit.converged
    d = design_matrix(net, cov, spec)
    refit = fit_mple(expand_design(d, spec, fit.assignment), d.y)
    np.testing.assert_allclose(fit.theta, refit.theta, atol=1e-6)
    np.testing.assert_allclose(fit.std_errors, refit.std_errors, rtol=1e-5)
    assert fit.log_cpl == pytest.approx(class_log_pseudolik(d, spec, fit.theta, fit.assignment))


def test_unconverged_cem_is_not_refined(planted_network):
    net, cov, spec, _ = planted_network
    fit = fit_cem(net, cov, spec, CemControls(n_starts=1, max_iter=1, seed=9, refine=True))
    assert not fit.converged
    assert fit.refined is None


def test_one_class_fit_is_plain_mple(rng, make_network):
    net = make_network(rng, 10, 0.3)
    spec = ModelSpec((TermSpec('edges'), TermSpec('mutual')))
    fit = fit_cem(net, CovariateTable.empty(10), spec)
    d = design_matrix(net, None, spec)
    np.testing.assert_allclose(fit.theta, fit_mple(d.X, d.y).theta)
    assert fit.labels.tolist() == [0] * 10
    assert fit.n_free_params == 2
    assert fit.bic == pytest.approx(-2 * fit.log_cpl + 2 * np.log(90))


def test_cem_recovers_classes_and_is_monotone(planted_network):
    net, cov, spec, planted = planted_network
    monitor.reset()
    fit = fit_cem(net, cov, spec, CemControls(n_starts=5, seed=3, refine=False))
    assert adjusted_rand(planted.labels, fit.labels) >= 0.9
    assert fit.assignment.sizes().tolist() == sorted(fit.assignment.sizes().tolist(), reverse=True)
    traces = [e['trace'] for e in monitor.events if e['event'] == 'cem_start']
    assert len(traces) == 5
    for trace in traces + [fit.trace]:
        for a, b in zip(trace, trace[1:]):
            assert b >= a - 1e-9 * (1 + abs(a))
    assert fit.log_cpl == pytest.approx(
        class_log_pseudolik(design_matrix(net, cov, spec), spec, fit.theta, fit.assignment))
    assert fit.log_cpl == max(d['log_cpl'] for d in fit.start_diagnostics if d['status'] == 'converged')


def test_cem_seed_determinism(planted_network):
    net, cov, spec, _ = planted_network
    a = fit_cem(net, cov, spec, CemControls(n_starts=3, seed=21, refine=False))
    b = fit_cem(net, cov, spec, CemControls(n_starts=3, seed=21, refine=False, jobs=3))
    assert np.array_equal(a.labels, b.labels)
    np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-12)
    assert a.best_start_seed == b.best_start_seed


def test_log_cpl_invariant_to_relabeling(planted_network):
    net, cov, spec, planted = planted_network
    d = design_matrix(net, cov, spec)
    theta = np.array([1.5, 0.3, -3.0, -0.5])
    swapped = np.array([1.5, 0.3, -0.5, -3.0])
    assert class_log_pseudolik(d, spec, theta, planted) == pytest.approx(
        class_log_pseudolik(d, spec, swapped, planted.permuted([1, 0])))


def _toy_fit(sizes, edges_params):
    spec = ModelSpec((TermSpec('mutual'), TermSpec('edges', heterogeneous=True)), n_classes=2)
    labels = np.repeat([0, 1], sizes)
    assignment = LabelAssignment.from_labels(labels, 2)
    theta = np.array([0.7] + list(edges_params))
    posterior = np.eye(2)[labels] * 0.9 + 0.05
    return MixtureFit(spec, assignment, theta, np.array([0.1, 0.2, 0.3]), posterior, -10.0, [-10.0], 1, 0)


def test_canonicalize_orders_by_size():
    fit = canonicalize(_toy_fit((40, 111), (-3.6, -4.2)))
    assert fit.assignment.sizes().tolist() == [111, 40]
    assert fit.theta.tolist() == [0.7, -4.2, -3.6]
    assert fit.std_errors.tolist() == [0.1, 0.3, 0.2]
    assert fit.posterior[0] == pytest.approx([0.05, 0.95])


def test_canonicalize_ties_by_edges_and_idempotent():
    fit = canonicalize(_toy_fit((5, 5), (-3.6, -4.2)))
    assert fit.theta.tolist() == [0.7, -4.2, -3.6]
    again = canonicalize(fit)
    assert np.array_equal(again.labels, fit.labels)
    assert again.theta.tolist() == fit.theta.tolist()


def test_canonicalize_ties_by_first_heterogeneous_term():
    spec = ModelSpec((TermSpec('edges'), TermSpec('sendercov', 'x', heterogeneous=True)), n_classes=2)
    assignment = LabelAssignment.from_labels(np.repeat([0, 1], (6, 6)), 2)
    # layout: edges, sendercov.x:class1, sendercov.x:class2
    theta = np.array([-2.0, 0.8, -0.4])
    fit = MixtureFit(spec, assignment, theta, np.array([0.1, 0.2, 0.3]), np.full((12, 2), 0.5),
                     -10.0, [-10.0], 1, 0)
    fit = canonicalize(fit)
    assert fit.theta.tolist() == [-2.0, -0.4, 0.8]
    assert fit.labels.tolist() == [1] * 6 + [0] * 6
    assert canonicalize(fit).theta.tolist() == [-2.0, -0.4, 0.8]


def test_all_starts_failing_raises(rng, make_network):
    net = make_network(rng, 12, 0.3)
    cov = CovariateTable.from_frame(pd.DataFrame({'c': np.ones(12)}), {'c': 'continuous'})
    spec = ModelSpec((TermSpec('edges', heterogeneous=True), TermSpec('sendercov', 'c', heterogeneous=True)),
                     n_classes=2)
    with pytest.raises(EstimationError) as err:
        fit_cem(net, cov, spec, CemControls(n_starts=2, seed=1, refine=False))
    assert len(err.value.diagnostics) == 2
    assert all(d['status'] == 'failed' for d in err.value.diagnostics)


def test_report_dict(planted_network):
    net, cov, spec, _ = planted_network
    fit = fit_cem(net, cov, spec, CemControls(n_starts=2, seed=4, refine=False))
    report = fit.to_dict(include_posterior=True)
    assert [p['name'] for p in report['parameters']] == spec.param_names()
    assert len(report['posterior']) == 40
    assert report['class_sizes'] == fit.assignment.sizes().tolist()
    assert 'refit' not in report
