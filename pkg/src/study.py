"""
Simulation-study harness.

A condition fixes one synthetic covariate table and one set of planted
class labels; only the networks vary across replications. Each replication
simulates a network at the generating parameters and fits every fit spec
(homogeneous and two-class). Results are written as per-fit parameter
tables, bias tables and ARI tables.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import beta

from . import config
from .errors import DegeneracyError, EstimationError, ModelSpecError, SrfmError
from .evaluation import BiasReport, adjusted_rand, adjusted_rand_subset, bias_table, relative_bias_reduction
from .mixture import CemControls, fit_cem
from .monitoring import monitor
from .network import CATEGORICAL, CONTINUOUS, CovariateTable
from .sampler import SamplerControls, plant_classes, simulate
from .terms import LabelAssignment, ModelSpec, TermSpec
from .utils import derive_seeds, read_json, write_json

logger = logging.getLogger(__name__)

CONDITION_NAMES = ('1', '1+', '2', '2+', '3', '3+', '4', '4+', '5')

# every shipped condition carries exactly these generating terms
TABLE1_TERMS = frozenset([
    'gwesp', 'mutual', 'nodematch.gender', 'nodematch.ethnicity',
    'sendercov.tobacco', 'receivercov.tobacco', 'sendercov.antisocial', 'receivercov.antisocial',
    'sendercov.mj', 'receivercov.mj', 'receivercov.alcohol',
    'absdiff.tobacco', 'absdiff.mj', 'absdiff.antisocial', 'absdiff.alcohol',
    'sendercov.alcohol', 'edges',
])
TABLE1_HETEROGENEOUS = frozenset(['gwesp', 'sendercov.alcohol', 'edges'])


# --- synthetic covariates ---

@dataclass(frozen=True)
class CovariateGeneratorSpec:
    """Marginals of the synthetic school covariates.

    Substance-use columns are zero-inflated ordinal scores: a fixed share of
    users, whose scores follow the listed level proportions starting at 1.
    """
    n_nodes: int = 151
    female_share: float = 0.527
    ethnicity_labels: Tuple[str, ...] = ('African-American', 'Asian', 'Latino/Hispanic', 'White', 'Mixed')
    ethnicity_weights: Tuple[float, ...] = (23.03, 1.32, 18.42, 48.03, 6.58)
    alcohol_users: float = 0.2697
    alcohol_levels: Tuple[float, ...] = (0.57, 0.26, 0.11, 0.06)
    tobacco_users: float = 0.0658
    tobacco_levels: Tuple[float, ...] = (0.22, 0.25, 0.30, 0.15, 0.08)
    mj_users: float = 0.0921
    mj_levels: Tuple[float, ...] = (0.45, 0.26, 0.20, 0.09)
    # antisocial = scale * Beta(a, b), bounded on [0, scale]
    antisocial_a: float = 2.0
    antisocial_b: float = 11.11
    antisocial_scale: float = 2.0

    def schema(self) -> Dict[str, str]:
        return {'gender': CATEGORICAL, 'ethnicity': CATEGORICAL, 'alcohol': CONTINUOUS,
                'tobacco': CONTINUOUS, 'mj': CONTINUOUS, 'antisocial': CONTINUOUS}


def _exact_counts(n: int, weights) -> np.ndarray:
    """Largest-remainder split of n items in proportion to weights."""
    w = np.asarray(weights, dtype=float)
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:n - counts.sum()]] += 1
    return counts


def _zero_inflated(rng, n: int, users: float, levels) -> np.ndarray:
    n_users = int(round(n * users))
    values = np.zeros(n)
    values[:n_users] = np.repeat(np.arange(1, len(levels) + 1), _exact_counts(n_users, levels))
    return rng.permutation(values)


def generate_covariates(gspec: CovariateGeneratorSpec, seed: int) -> CovariateTable:
    """One synthetic covariate table; category and user counts are exact, order is random."""
    rng = np.random.default_rng(seed)
    n = gspec.n_nodes
    n_female = int(round(n * gspec.female_share))
    gender = rng.permutation(np.array(['M'] * (n - n_female) + ['F'] * n_female))
    ethnicity = rng.permutation(np.repeat(np.array(gspec.ethnicity_labels),
                                          _exact_counts(n, gspec.ethnicity_weights)))
    frame = pd.DataFrame({
        'gender': gender,
        'ethnicity': ethnicity,
        'alcohol': _zero_inflated(rng, n, gspec.alcohol_users, gspec.alcohol_levels),
        'tobacco': _zero_inflated(rng, n, gspec.tobacco_users, gspec.tobacco_levels),
        'mj': _zero_inflated(rng, n, gspec.mj_users, gspec.mj_levels),
        'antisocial': gspec.antisocial_scale * beta.rvs(gspec.antisocial_a, gspec.antisocial_b,
                                                        size=n, random_state=rng),
    })
    return CovariateTable.from_frame(frame, gspec.schema())


def resample_covariates(base: CovariateTable, n_target: int, seed: int) -> CovariateTable:
    """Rows drawn i.i.d. with replacement from the base table."""
    if n_target < 2:
        raise ValueError("n_target must be >= 2")
    rows = np.random.default_rng(seed).integers(0, base.n_nodes, size=n_target)
    return base.take(rows)


# --- conditions ---

@dataclass(frozen=True)
class FitSpec:
    name: str
    spec: ModelSpec


@dataclass(frozen=True)
class StudyCondition:
    name: str
    generator: ModelSpec
    generator_theta: np.ndarray
    class_proportions: Tuple[float, ...]
    fit_specs: Tuple[FitSpec, ...]
    n_replications: int = config.STUDY_REPLICATIONS
    n_nodes: int = config.STUDY_N_NODES
    seed: int = 0
    subset_column: Optional[str] = 'alcohol'
    covariates: CovariateGeneratorSpec = field(default_factory=CovariateGeneratorSpec)
    description: str = ''
    notes: Tuple[str, ...] = ()

    def generator_values(self) -> Dict[str, float]:
        return dict(zip(self.generator.param_names(), map(float, self.generator_theta)))

    def mixture_fit(self) -> Optional[FitSpec]:
        for f in self.fit_specs:
            if f.spec.n_classes > 1:
                return f
        return None

    def truth_rows(self, fit_spec: ModelSpec) -> List[Tuple[str, float, str]]:
        """(row name, true value, fitted parameter name) for a fit's bias table.

        A parameter the fit treats as homogeneous but the generator splits by
        class yields one row per generating class, all compared with the
        same estimate.
        """
        truth = self.generator_values()
        rows = []
        for name in fit_spec.param_names():
            base, _, cls = name.partition(':')
            if cls:
                rows.append((name, truth.get(name, truth.get(base)), name))
            elif base in truth:
                rows.append((name, truth[base], name))
            else:
                rows += [(f"{base}:class{q + 1}", truth[f"{base}:class{q + 1}"], name)
                         for q in range(self.generator.n_classes)]
        return rows

    def with_overrides(self, **changes) -> 'StudyCondition':
        fields = dict(self.__dict__)
        fields.update({k: v for k, v in changes.items() if v is not None})
        return StudyCondition(**fields)


def _condition_from_dict(payload: dict) -> StudyCondition:
    name = str(payload.get('name', ''))
    props = tuple(float(p) for p in payload.get('class_proportions', config.CLASS_PROPORTIONS))
    n_classes = len(props)
    terms, values, het = [], [], []
    for i, t in enumerate(payload.get('terms', [])):
        if 'value' not in t:
            raise ModelSpecError(f"condition {name}: term {i} has no generating value")
        value = t['value']
        is_het = isinstance(value, list)
        if is_het and len(value) != n_classes:
            raise ModelSpecError(f"condition {name}: term {i} needs {n_classes} class values")
        terms.append(TermSpec(t['kind'], t.get('covariate'), t.get('decay'), is_het and n_classes > 1))
        values.append([float(v) for v in value] if is_het else float(value))
    generator = ModelSpec(tuple(terms), n_classes if any(t.heterogeneous for t in terms) else 1,
                          payload.get('mode', 'sender'))

    labels = generator.labels
    if name in CONDITION_NAMES:
        missing = TABLE1_TERMS - set(labels)
        extra = set(labels) - TABLE1_TERMS
        split = {t.label for t in generator.terms if t.heterogeneous}
        if missing or extra or split != TABLE1_HETEROGENEOUS:
            raise ModelSpecError(f"condition {name} does not match the simulation-conditions table "
                                 f"(missing {sorted(missing)}, extra {sorted(extra)}, "
                                 f"class-specific {sorted(split)})")

    hom = [values[k] for k in generator.homogeneous_idx]
    blocks = [[values[k][q] for k in generator.heterogeneous_idx] for q in range(generator.n_classes)]
    theta = np.array(hom + [v for b in blocks for v in b]) if generator.n_classes > 1 else np.array(hom)

    fit_specs = []
    for f in payload.get('fit_specs', [{'name': 'homogeneous', 'heterogeneous': []}]):
        hetero = f.get('heterogeneous', [])
        spec = generator.homogeneous().with_heterogeneous(hetero, n_classes if hetero else 1)
        fit_specs.append(FitSpec(str(f['name']), spec))

    return StudyCondition(
        name=name, generator=generator, generator_theta=theta, class_proportions=props,
        fit_specs=tuple(fit_specs),
        n_replications=int(payload.get('n_replications', config.STUDY_REPLICATIONS)),
        n_nodes=int(payload.get('n_nodes', config.STUDY_N_NODES)),
        seed=int(payload.get('seed', 0)), subset_column=payload.get('subset_column'),
        description=payload.get('description', ''), notes=tuple(payload.get('notes', [])))


def available_conditions(conditions_dir: Optional[str] = None) -> List[str]:
    conditions_dir = conditions_dir or config.CONDITIONS_DIR
    if not os.path.isdir(conditions_dir):
        return []
    names = [f[len('condition_'):-len('.json')] for f in os.listdir(conditions_dir)
             if f.startswith('condition_') and f.endswith('.json')]
    order = {n: i for i, n in enumerate(CONDITION_NAMES)}
    return sorted(names, key=lambda n: (order.get(n, len(order)), n))


def load_condition(name_or_path: str, conditions_dir: Optional[str] = None) -> StudyCondition:
    """Load a shipped condition by name (e.g. '3+') or a custom condition file by path."""
    if os.path.isfile(name_or_path):
        path = name_or_path
    else:
        path = os.path.join(conditions_dir or config.CONDITIONS_DIR, f"condition_{name_or_path}.json")
        if not os.path.isfile(path):
            valid = ', '.join(available_conditions(conditions_dir)) or 'none found'
            raise ModelSpecError(f"unknown condition {name_or_path!r}; valid names: {valid}")
    try:
        payload = read_json(path)
    except json.JSONDecodeError as e:
        raise ModelSpecError(f"{path}: malformed JSON ({e})") from None
    return _condition_from_dict(payload)


# --- replications ---

@dataclass
class _ReplicationJob:
    condition: StudyCondition
    covariates: CovariateTable
    planted: LabelAssignment
    replication: int
    seed: int
    n_starts: int
    refine: bool
    fit_names: Tuple[str, ...]


def _fit_record(fit) -> dict:
    theta, se = fit.final_estimates()
    return {'status': 'ok' if fit.converged else 'not_converged',
            'log_cpl': float(fit.log_cpl),
            'estimates': dict(zip(fit.param_names, map(float, theta))),
            'std_errors': dict(zip(fit.param_names, map(float, se))),
            'labels': fit.labels.tolist(),
            'n_classes': fit.spec.n_classes}


def _run_replication(job: _ReplicationJob) -> dict:
    cond = job.condition
    fit_specs = [f for f in cond.fit_specs if f.name in job.fit_names]
    seeds = derive_seeds(job.seed, 1 + len(fit_specs))
    out = {'replication': job.replication, 'status': 'ok', 'error': '', 'fits': {}}
    try:
        controls = SamplerControls.for_network(job.covariates.n_nodes, n_draws=1, seed=seeds[0])
        net = simulate(cond.generator, job.covariates, cond.generator_theta, job.planted, controls)[0]
    except (DegeneracyError, SrfmError, ValueError) as e:
        out.update(status='failed', error=f"simulation: {e}")
        return out
    out['density'] = net.density()
    for f, seed in zip(fit_specs, seeds[1:]):
        try:
            fit = fit_cem(net, job.covariates, f.spec,
                          CemControls(n_starts=job.n_starts, seed=seed, refine=job.refine))
            record = _fit_record(fit)
            if f.spec.n_classes > 1:
                record['ari'] = adjusted_rand(job.planted.labels, fit.labels)
                if cond.subset_column:
                    mask = job.covariates.values(cond.subset_column) > 0
                    record['ari_users'] = (adjusted_rand_subset(job.planted.labels, fit.labels, mask)
                                           if mask.sum() >= 2 else float('nan'))
        except (EstimationError, DegeneracyError, SrfmError, ValueError, np.linalg.LinAlgError) as e:
            record = {'status': 'failed', 'error': str(e).splitlines()[0]}
        out['fits'][f.name] = record
    return out


def _map_jobs(jobs: Sequence[_ReplicationJob], n_workers: int) -> List[dict]:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_replication, jobs))
    else:
        results = [_run_replication(j) for j in jobs]
    return sorted(results, key=lambda r: r['replication'])


@dataclass
class StudyResult:
    condition: str
    fits: Dict[str, pd.DataFrame]
    bias: Dict[str, BiasReport]
    ari: pd.DataFrame
    failures: Dict[str, int]
    paths: List[str] = field(default_factory=list)
    # (parameters with smaller |relative bias| under the mixture fit, parameters compared)
    bias_reduction: Optional[Tuple[int, int]] = None

    def summary(self) -> dict:
        out = {'condition': self.condition, 'failures': dict(self.failures)}
        if len(self.ari):
            out['mean_ari'] = float(self.ari['ari'].mean())
            if 'ari_users' in self.ari:
                out['mean_ari_users'] = float(self.ari['ari_users'].mean())
        if self.bias_reduction is not None:
            out['bias_reduction'] = {'reduced': self.bias_reduction[0], 'compared': self.bias_reduction[1]}
        return out


def _fits_frame(results: List[dict], fit_name: str, param_names: List[str]) -> pd.DataFrame:
    rows = []
    for r in results:
        rec = r['fits'].get(fit_name, {'status': r['status'], 'error': r['error']})
        row = {'replication': r['replication'], 'status': rec['status'], 'log_cpl': rec.get('log_cpl')}
        for p in param_names:
            row[p] = rec.get('estimates', {}).get(p)
            row[f"{p}.se"] = rec.get('std_errors', {}).get(p)
        rows.append(row)
    return pd.DataFrame(rows, columns=['replication', 'status', 'log_cpl'] +
                        [c for p in param_names for c in (p, f"{p}.se")])


def _bias_report(cond: StudyCondition, fit_spec: FitSpec, results: List[dict]) -> BiasReport:
    rows = cond.truth_rows(fit_spec.spec)
    truth = {row: value for row, value, _ in rows}
    fits = []
    for r in results:
        rec = r['fits'].get(fit_spec.name)
        if not rec or rec['status'] != 'ok':
            continue
        fits.append({row: (rec['estimates'][p], rec['std_errors'][p]) for row, _, p in rows})
    return bias_table(truth, fits)


def _prepare(cond: StudyCondition, n_nodes: int, base: Optional[CovariateTable], seed: int):
    cov_seed, plant_seed, rep_seed = derive_seeds(seed, 3)
    if base is None:
        covariates = generate_covariates(CovariateGeneratorSpec(**{**cond.covariates.__dict__, 'n_nodes': n_nodes}),
                                         cov_seed)
    else:
        covariates = resample_covariates(base, n_nodes, cov_seed)
    planted = plant_classes(n_nodes, cond.class_proportions, plant_seed)
    return covariates, planted, rep_seed


def run_condition(cond: StudyCondition, out_dir: str, jobs: int = 1, n_starts: Optional[int] = None,
                  refine: bool = False) -> StudyResult:
    """Simulate and fit every replication of a condition and write its tables."""
    os.makedirs(out_dir, exist_ok=True)
    n_starts = n_starts or config.CEM_N_STARTS
    covariates, planted, rep_seed = _prepare(cond, cond.n_nodes, None, cond.seed)
    logger.info(f"[Study] Condition {cond.name}: {cond.n_replications} replications at N={cond.n_nodes}, "
                f"class sizes {planted.sizes().tolist()}")
    fit_names = tuple(f.name for f in cond.fit_specs)
    job_list = [_ReplicationJob(cond, covariates, planted, k + 1, s, n_starts, refine, fit_names)
                for k, s in enumerate(derive_seeds(rep_seed, cond.n_replications))]
    results = _map_jobs(job_list, jobs)

    paths, fits, bias, failures = [], {}, {}, {}
    for f in cond.fit_specs:
        frame = _fits_frame(results, f.name, f.spec.param_names())
        fits[f.name] = frame
        failures[f.name] = int((frame['status'] != 'ok').sum())
        path = os.path.join(out_dir, f"fits_{cond.name}_{f.name}.csv")
        frame.to_csv(path, index=False, na_rep='NA', float_format='%.10g')
        bias[f.name] = _bias_report(cond, f, results)
        paths += [path, bias[f.name].to_csv(os.path.join(out_dir, f"bias_{cond.name}_{f.name}.csv"))]

    ari_rows = []
    mixture = cond.mixture_fit()
    for r in results:
        monitor.send_replication(cond.name, r['replication'], r['status'], error=r['error'],
                                 fits={k: v['status'] for k, v in r['fits'].items()})
        rec = r['fits'].get(mixture.name) if mixture else None
        if rec and rec['status'] == 'ok':
            ari_rows.append({'replication': r['replication'], 'ari': rec['ari'],
                             'ari_users': rec.get('ari_users', float('nan'))})
    ari = pd.DataFrame(ari_rows, columns=['replication', 'ari', 'ari_users'])
    ari_path = os.path.join(out_dir, f"ari_{cond.name}.csv")
    ari.to_csv(ari_path, index=False, na_rep='NA', float_format='%.10g')
    paths.append(ari_path)

    homogeneous = next((f for f in cond.fit_specs if f.spec.n_classes == 1), None)
    reduction = (relative_bias_reduction(bias[homogeneous.name], bias[mixture.name])
                 if homogeneous and mixture else None)
    result = StudyResult(cond.name, fits, bias, ari, failures, paths, reduction)
    paths.append(write_json(os.path.join(out_dir, f"summary_{cond.name}.json"), result.summary()))
    for name, count in failures.items():
        if count:
            logger.warning(f"[Study] Condition {cond.name}: {count} of {cond.n_replications} "
                           f"'{name}' fits failed or did not converge")
    return result


def run_size_sweep(cond_base: StudyCondition, sizes: Sequence[int], reps_per_size: int, out_dir: str,
                   jobs: int = 1, n_starts: Optional[int] = None, refine: bool = False) -> pd.DataFrame:
    """ARI of the correctly specified fit across network sizes.

    Each size gets one covariate table resampled with replacement from the
    condition's base table, one set of planted labels and reps_per_size
    simulated networks. Writes sweep_<condition>.csv with columns
    n_nodes, replication, ari.
    """
    sizes = [int(n) for n in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly ascending, got {sizes}")
    mixture = cond_base.mixture_fit()
    if mixture is None:
        raise ModelSpecError(f"condition {cond_base.name} has no two-class fit to sweep")
    os.makedirs(out_dir, exist_ok=True)
    n_starts = n_starts or config.CEM_N_STARTS
    base_cov, _, _ = _prepare(cond_base, cond_base.n_nodes, None, cond_base.seed)

    rows = []
    for n_nodes, size_seed in zip(sizes, derive_seeds(cond_base.seed + 1, len(sizes))):
        covariates, planted, rep_seed = _prepare(cond_base, n_nodes, base_cov, size_seed)
        job_list = [_ReplicationJob(cond_base, covariates, planted, k + 1, s, n_starts, refine,
                                    (mixture.name,))
                    for k, s in enumerate(derive_seeds(rep_seed, reps_per_size))]
        for r in _map_jobs(job_list, jobs):
            rec = r['fits'].get(mixture.name)
            ok = rec is not None and rec['status'] == 'ok'
            monitor.send_replication(cond_base.name, r['replication'], r['status'] if ok else 'failed',
                                     n_nodes=n_nodes)
            rows.append({'n_nodes': n_nodes, 'replication': r['replication'],
                         'ari': rec['ari'] if ok else float('nan')})
        logger.info(f"[Study] Sweep {cond_base.name}: N={n_nodes} done")
    frame = pd.DataFrame(rows, columns=['n_nodes', 'replication', 'ari'])
    frame.to_csv(os.path.join(out_dir, f"sweep_{cond_base.name}.csv"), index=False, na_rep='NA',
                 float_format='%.10g')
    return frame
