import json

import numpy as np
import pandas as pd
import pytest

from src import config, study
from src.errors import ModelSpecError
from src.evaluation import relative_bias_reduction
from src.study import (CONDITION_NAMES, CovariateGeneratorSpec, available_conditions,
                       generate_covariates, load_condition, resample_covariates, run_condition,
                       run_size_sweep)


def _small_condition(tmp_path, name='tiny'):
    payload = {
        'name': name, 'mode': 'sender', 'class_proportions': [0.75, 0.25], 'n_nodes': 30,
        'n_replications': 2, 'seed': 5, 'subset_column': 'alcohol',
        'terms': [
            {'kind': 'mutual', 'value': 1.0},
            {'kind': 'sendercov', 'covariate': 'alcohol', 'value': 0.3},
            {'kind': 'edges', 'value': [-1.0, -3.5]},
        ],
        'fit_specs': [{'name': 'homogeneous', 'heterogeneous': []},
                      {'name': 'heterogeneous', 'heterogeneous': ['edges']}],
    }
    path = tmp_path / f'{name}.json'
    path.write_text(json.dumps(payload))
    return str(path)


def test_covariates_match_marginals():
    cov = generate_covariates(CovariateGeneratorSpec(), seed=1)
    assert cov.n_nodes == 151
    assert cov.kind('gender') == 'categorical' and cov.kind('alcohol') == 'continuous'
    assert abs(cov.values('alcohol').mean() - 0.4476) <= 0.15
    assert int((cov.values('alcohol') > 0).sum()) == 41
    assert int((cov.to_frame()['gender'] == 'F').sum()) == 80
    assert len(cov.codebook('ethnicity')) == 5
    antisocial = cov.values('antisocial')
    assert antisocial.min() >= 0 and antisocial.max() <= 2
    big = generate_covariates(CovariateGeneratorSpec(n_nodes=1000), seed=2)
    assert abs((big.values('alcohol') > 0).mean() - 0.2697) <= 0.05
    assert set(np.unique(big.values('tobacco'))) <= {0, 1, 2, 3, 4, 5}


def test_covariates_deterministic():
    a = generate_covariates(CovariateGeneratorSpec(n_nodes=50), seed=9).to_frame()
    b = generate_covariates(CovariateGeneratorSpec(n_nodes=50), seed=9).to_frame()
    pd.testing.assert_frame_equal(a, b)


def test_resample_covariates():
    base = generate_covariates(CovariateGeneratorSpec(n_nodes=60), seed=3)
    sub = resample_covariates(base, 60, seed=4)
    base_rows = set(map(tuple, base.to_frame().values.tolist()))
    assert set(map(tuple, sub.to_frame().values.tolist())) <= base_rows
    pd.testing.assert_frame_equal(sub.to_frame(), resample_covariates(base, 60, seed=4).to_frame())
    big = resample_covariates(base, 1000, seed=5)
    assert big.values('antisocial').mean() == pytest.approx(base.values('antisocial').mean(), abs=0.05)
    with pytest.raises(ValueError):
        resample_covariates(base, 1, seed=0)


def test_shipped_conditions_load():
    assert available_conditions() == list(CONDITION_NAMES)
    for name in CONDITION_NAMES:
        cond = load_condition(name)
        assert cond.generator.n_classes == 2
        assert len(cond.generator_theta) == cond.generator.n_params == 20
        assert [f.name for f in cond.fit_specs] == ['homogeneous', 'heterogeneous']
        assert cond.n_nodes == config.STUDY_N_NODES


def test_condition_values():
    cond = load_condition('3+')
    values = cond.generator_values()
    assert values['edges:class1'] == -3.25 and values['edges:class2'] == -4.75
    assert values['sendercov.alcohol:class2'] == -1.0
    assert values['mutual'] == 2.34
    het = cond.mixture_fit().spec
    assert set(het.param_names()) >= {'edges:class1', 'sendercov.alcohol:class2', 'gwesp'}


def test_truth_rows_split_homogeneous_parameters():
    cond = load_condition('4')
    hom = cond.fit_specs[0].spec
    rows = {row: (truth, param) for row, truth, param in cond.truth_rows(hom)}
    assert rows['edges:class1'][1] == 'edges' and rows['edges:class2'][1] == 'edges'
    assert rows['mutual'] == (2.34, 'mutual')
    het = cond.mixture_fit().spec
    rows = {row: (truth, param) for row, truth, param in cond.truth_rows(het)}
    assert rows['gwesp:class1'][1] == 'gwesp:class1'
    assert rows['edges:class2'][1] == 'edges'


def test_unknown_condition_lists_names():
    with pytest.raises(ModelSpecError, match=r"valid names: 1, 1\+"):
        load_condition('7')


def test_condition_coverage_checks(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'name': 'custom', 'terms': [{'kind': 'edges', 'value': [-1, -2, -3]}]}))
    with pytest.raises(ModelSpecError, match='class values'):
        load_condition(str(path))
    path.write_text(json.dumps({'name': 'custom', 'terms': [{'kind': 'edges'}]}))
    with pytest.raises(ModelSpecError, match='generating value'):
        load_condition(str(path))
    path.write_text(json.dumps({'name': '2', 'terms': [{'kind': 'edges', 'value': [-1, -2]}]}))
    with pytest.raises(ModelSpecError, match='missing'):
        load_condition(str(path))


def test_run_condition_outputs(tmp_path):
    cond = load_condition(_small_condition(tmp_path))
    result = run_condition(cond, str(tmp_path / 'out'), n_starts=2)
    out = tmp_path / 'out'
    for name in ('fits_tiny_homogeneous.csv', 'fits_tiny_heterogeneous.csv', 'bias_tiny_homogeneous.csv',
                 'bias_tiny_heterogeneous.csv', 'ari_tiny.csv', 'summary_tiny.json'):
        assert (out / name).exists()
    fits = pd.read_csv(out / 'fits_tiny_heterogeneous.csv')
    assert len(fits) == 2
    assert {'edges:class1', 'edges:class1.se', 'mutual'} <= set(fits.columns)
    bias = result.bias['homogeneous']
    assert set(bias.parameters) == {'mutual', 'sendercov.alcohol', 'edges:class1', 'edges:class2'}
    assert bias.row('edges:class2')['true_value'] == -3.5
    assert list(result.ari.columns) == ['replication', 'ari', 'ari_users']
    assert sum(result.failures.values()) + len(result.ari) >= 2


def test_run_condition_parallel_matches_serial(tmp_path):
    cond = load_condition(_small_condition(tmp_path))
    serial = run_condition(cond, str(tmp_path / 'serial'), jobs=1, n_starts=2)
    parallel = run_condition(cond, str(tmp_path / 'parallel'), jobs=2, n_starts=2)
    for name in serial.fits:
        pd.testing.assert_frame_equal(serial.fits[name], parallel.fits[name])
    assert (tmp_path / 'serial' / 'ari_tiny.csv').read_text() == (tmp_path / 'parallel' / 'ari_tiny.csv').read_text()


def test_summary_counts_bias_reduction(tmp_path):
    cond = load_condition(_small_condition(tmp_path))
    result = run_condition(cond, str(tmp_path / 'out'), n_starts=2)
    summary = json.loads((tmp_path / 'out' / 'summary_tiny.json').read_text())
    assert summary['bias_reduction'] == {'reduced': result.bias_reduction[0],
                                         'compared': result.bias_reduction[1]}
    assert 0 <= summary['bias_reduction']['reduced'] <= summary['bias_reduction']['compared'] <= 4


def test_fit_value_error_is_a_failed_replication(tmp_path, monkeypatch):
    real_fit_cem = study.fit_cem

    def fit_cem(net, cov, spec, controls):
        if spec.n_classes > 1:
            raise ValueError("design has too few rows")
        return real_fit_cem(net, cov, spec, controls)

    monkeypatch.setattr(study, 'fit_cem', fit_cem)
    cond = load_condition(_small_condition(tmp_path))
    result = run_condition(cond, str(tmp_path / 'out'), n_starts=2)
    assert result.failures['heterogeneous'] == 2
    assert result.fits['heterogeneous']['status'].tolist() == ['failed', 'failed']
    assert (result.fits['homogeneous']['status'] != 'failed').all()
    assert len(result.ari) == 0


def test_size_sweep(tmp_path):
    cond = load_condition(_small_condition(tmp_path))
    with pytest.raises(ValueError):
        run_size_sweep(cond, [30, 20], 1, str(tmp_path))
    frame = run_size_sweep(cond, [20, 30], 2, str(tmp_path / 'sweep'), n_starts=2)
    assert frame['n_nodes'].tolist() == [20, 20, 30, 30]
    assert (tmp_path / 'sweep' / 'sweep_tiny.csv').exists()


# --- desk-scale acceptance runs ---

@pytest.fixture(scope='module')
def results_3plus(tmp_path_factory):
    return run_condition(load_condition('3+'), str(tmp_path_factory.mktemp('c3p')), jobs=config.JOBS)


@pytest.mark.slow
def test_high_separation_recovers_classes(results_3plus):
    assert results_3plus.ari['ari'].mean() >= 0.90
    assert results_3plus.ari['ari_users'].mean() >= 0.95


@pytest.mark.slow
def test_homogeneous_misfit_bias_signature(results_3plus):
    bias = results_3plus.bias['homogeneous']
    assert bias.relative_bias('gwesp:class1') > 0.3
    assert bias.relative_bias('sendercov.antisocial') < -0.5


@pytest.mark.slow
def test_heterogeneous_fit_reduces_bias(results_3plus):
    reduced, compared = relative_bias_reduction(results_3plus.bias['homogeneous'],
                                                results_3plus.bias['heterogeneous'])
    assert reduced >= 0.75 * compared


@pytest.mark.slow
def test_low_separation_is_conservative(tmp_path):
    result = run_condition(load_condition('2'), str(tmp_path), jobs=config.JOBS)
    assert result.ari['ari'].mean() <= 0.25


@pytest.fixture(scope='module')
def results_5(tmp_path_factory):
    return run_condition(load_condition('5'), str(tmp_path_factory.mktemp('c5')), jobs=config.JOBS)


@pytest.mark.slow
def test_homogeneous_data_gives_overlapping_classes(results_5):
    result = results_5
    bias = result.bias['heterogeneous']
    for term in ('edges', 'sendercov.alcohol'):
        rows = [bias.row(f"{term}:class{q}") for q in (1, 2)]
        truth = rows[0]['true_value']
        means = [r['mean_estimate'] for r in rows]
        pooled = np.sqrt(sum(r['mean_estimated_se'] ** 2 for r in rows))
        assert min(means) <= truth <= max(means) or max(abs(m - truth) for m in means) <= 3 * pooled


@pytest.mark.slow
def test_ari_improves_with_network_size(tmp_path):
    frame = run_size_sweep(load_condition('3'), [75, 151, 300], 10, str(tmp_path), jobs=config.JOBS)
    medians = frame.groupby('n_nodes')['ari'].median().tolist()
    assert medians == sorted(medians)


@pytest.mark.slow
def test_homogeneous_data_class_blocks_close_per_replication(results_5):
    fits = results_5.fits['heterogeneous']
    fits = fits[fits['status'] == 'ok']
    assert len(fits) > 0
    close = np.ones(len(fits), dtype=bool)
    for term in ('edges', 'sendercov.alcohol'):
        a, b = f"{term}:class1", f"{term}:class2"
        pooled = np.sqrt(fits[f"{a}.se"] ** 2 + fits[f"{b}.se"] ** 2)
        close &= ((fits[a] - fits[b]).abs() < 3 * pooled).to_numpy()
    assert close.mean() >= 0.8
