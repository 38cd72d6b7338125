import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, logit

from src.errors import DegeneracyError, EmptyClassError, ModelSpecError
from src.network import CovariateTable, DirectedNetwork
from src.sampler import (SamplerControls, _Chain, edge_frequencies, plant_classes, simulate,
                         write_draws)
from src.terms import LabelAssignment, ModelSpec, TermSpec


def test_controls_validation_and_defaults():
    with pytest.raises(ValueError):
        SamplerControls(burn_in=0, thin=1, n_draws=0)
    with pytest.raises(ValueError):
        SamplerControls(burn_in=-1, thin=1, n_draws=1)
    ctl = SamplerControls.for_network(10, n_draws=3, seed=4)
    assert (ctl.burn_in, ctl.thin, ctl.n_draws, ctl.seed) == (1800, 90, 3, 4)


def test_edges_only_density_calibration():
    spec = ModelSpec((TermSpec('edges'),))
    draws = simulate(spec, CovariateTable.empty(30), [-1.0],
                     controls=SamplerControls.for_network(30, n_draws=200, seed=11))
    assert len(draws) == 200
    mean_density = np.mean([d.density() for d in draws])
    assert abs(mean_density - expit(-1.0)) <= 0.01


def test_dyad_independent_edge_frequencies(rng, make_covariates):
    cov = make_covariates(rng, 8)
    spec = ModelSpec((TermSpec('edges'), TermSpec('nodematch', 'group')))
    theta = [-1.5, 2.0]
    draws = simulate(spec, cov, theta, controls=SamplerControls.for_network(8, n_draws=1500, seed=3))
    freq = edge_frequencies(draws)
    g = cov.values('group')
    expected = expit(-1.5 + 2.0 * (g[:, None] == g[None, :]))
    off = ~np.eye(8, dtype=bool)
    assert np.abs(freq - expected)[off].mean() < 0.03


def test_seed_determinism(rng, make_covariates):
    cov = make_covariates(rng, 12)
    spec = ModelSpec((TermSpec('edges'), TermSpec('mutual'), TermSpec('gwesp', decay=0.5)))
    ctl = SamplerControls(burn_in=500, thin=50, n_draws=4, seed=99)
    a = simulate(spec, cov, [-2.0, 1.0, 0.3], controls=ctl)
    b = simulate(spec, cov, [-2.0, 1.0, 0.3], controls=ctl)
    assert a == b


def test_class_swap_gives_identical_draws(rng, make_covariates):
    cov = make_covariates(rng, 10)
    spec = ModelSpec((TermSpec('edges', heterogeneous=True), TermSpec('mutual')), n_classes=2)
    labels = np.array([0, 0, 1, 0, 1, 1, 0, 0, 0, 1])
    ctl = SamplerControls(burn_in=300, thin=30, n_draws=3, seed=5)
    # layout: mutual, edges:class1, edges:class2
    a = simulate(spec, cov, [1.0, -2.5, -0.5], LabelAssignment.from_labels(labels, 2), ctl)
    b = simulate(spec, cov, [1.0, -0.5, -2.5], LabelAssignment.from_labels(1 - labels, 2), ctl)
    assert a == b


def test_mixture_draws_follow_labels():
    n = 20
    spec = ModelSpec((TermSpec('edges', heterogeneous=True),), n_classes=2)
    labels = np.array([0] * 10 + [1] * 10)
    draws = simulate(spec, CovariateTable.empty(n), [-3.0, 0.0], labels,
                     SamplerControls.for_network(n, n_draws=20, seed=8))
    out_density = np.mean([d.adjacency.sum(axis=1) for d in draws], axis=0) / (n - 1)
    assert out_density[:10].mean() == pytest.approx(expit(-3.0), abs=0.04)
    assert out_density[10:].mean() == pytest.approx(0.5, abs=0.06)


def test_mixture_needs_labels():
    spec = ModelSpec((TermSpec('edges', heterogeneous=True),), n_classes=2)
    with pytest.raises(ModelSpecError):
        simulate(spec, CovariateTable.empty(4), [0.0, 0.0])
    with pytest.raises(EmptyClassError):
        simulate(spec, CovariateTable.empty(4), [0.0, 0.0], [0, 0, 0, 0])


def test_non_finite_predictor_raises():
    spec = ModelSpec((TermSpec('edges'),))
    with pytest.raises(DegeneracyError) as err:
        simulate(spec, CovariateTable.empty(5), [float('nan')],
                 controls=SamplerControls(burn_in=10, thin=1, n_draws=1))
    assert err.value.dyad is not None


def test_init_network_size_checked():
    spec = ModelSpec((TermSpec('edges'),))
    with pytest.raises(ValueError):
        simulate(spec, CovariateTable.empty(5), [0.0], init=DirectedNetwork.empty(4))


def test_shared_partner_counts_stay_current(rng):
    spec = ModelSpec((TermSpec('edges'), TermSpec('gwesp', decay=0.2)))
    chain = _Chain(spec, CovariateTable.empty(9), [0.0, 0.1], LabelAssignment.single_class(9), None)
    for _ in range(400):
        i, j = rng.choice(9, size=2, replace=False)
        chain.set(int(i), int(j), bool(rng.random() < 0.5))
    a = chain.adj.astype(np.int64)
    np.testing.assert_array_equal(chain.ep, a @ a)


def test_plant_classes_exact_sizes():
    planted = plant_classes(151, (0.75, 0.25), seed=1)
    assert planted.sizes().tolist() == [113, 38]
    assert planted.alpha == pytest.approx([113 / 151, 38 / 151])
    again = plant_classes(151, (0.75, 0.25), seed=1)
    assert np.array_equal(planted.labels, again.labels)
    with pytest.raises(ValueError):
        plant_classes(10, (0.5, 0.6), seed=1)


def test_write_draws(tmp_path, rng, make_network, make_covariates):
    cov = make_covariates(rng, 6)
    draws = [make_network(rng, 6, 0.3) for _ in range(3)]
    spec = ModelSpec((TermSpec('edges'), TermSpec('sendercov', 'score')))
    paths = write_draws(draws, str(tmp_path), spec, cov, one_based=True)
    assert [p.rsplit('/', 1)[-1] for p in paths] == ['draw_0001.csv', 'draw_0002.csv', 'draw_0003.csv']
    stats = pd.read_csv(tmp_path / 'statistics.csv')
    assert list(stats.columns) == ['draw', 'edges', 'sendercov.score']
    assert stats['edges'].tolist() == [d.n_edges for d in draws]
    first = pd.read_csv(paths[0])
    assert first['from'].min() >= 1


def _reciprocated_share(draws):
    """Share of edges that are reciprocated; about the density when dyads are independent."""
    return np.array([2 * d.reciprocity() / max(d.n_edges, 1) for d in draws])


def test_mutual_term_raises_reciprocity():
    n = 30
    cov = CovariateTable.empty(n)
    ctl = SamplerControls.for_network(n, n_draws=200, seed=17)
    mutual = simulate(ModelSpec((TermSpec('edges'), TermSpec('mutual'))), cov, [-2.0, 2.0], controls=ctl)
    density = np.mean([d.density() for d in mutual])
    baseline = simulate(ModelSpec((TermSpec('edges'),)), cov, [float(logit(density))],
                        controls=ctl)
    gap = _reciprocated_share(mutual) - _reciprocated_share(baseline)
    assert gap.mean() > 3 * gap.std(ddof=1) / np.sqrt(len(gap))
    assert _reciprocated_share(mutual).mean() == pytest.approx(0.5, abs=0.05)


def test_receiver_mode_draws_follow_labels():
    n = 20
    spec = ModelSpec((TermSpec('edges', heterogeneous=True),), n_classes=2, mode='receiver')
    labels = np.array([0] * 10 + [1] * 10)
    draws = simulate(spec, CovariateTable.empty(n), [-3.0, 0.0], labels,
                     SamplerControls.for_network(n, n_draws=20, seed=8))
    in_density = np.mean([d.adjacency.sum(axis=0) for d in draws], axis=0) / (n - 1)
    assert in_density[:10].mean() == pytest.approx(expit(-3.0), abs=0.04)
    assert in_density[10:].mean() == pytest.approx(0.5, abs=0.05)
