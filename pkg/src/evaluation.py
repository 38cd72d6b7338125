"""
Study metrics: adjusted Rand index, bias tables and class-contrast z-tests.
"""
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.metrics.cluster import adjusted_rand_score
from sklearn.metrics.cluster import contingency_matrix as _contingency

logger = logging.getLogger(__name__)

BIAS_COLUMNS = ['parameter', 'true_value', 'mean_estimate', 'raw_bias', 'relative_bias',
                'empirical_sd', 'mean_estimated_se', 'n_replications']


def contingency_matrix(labels_a, labels_b) -> np.ndarray:
    """Counts of items per (class in a, class in b), classes in sorted order."""
    return _contingency(np.asarray(labels_a).ravel(), np.asarray(labels_b).ravel())


def adjusted_rand(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index; 1.0 for partitions equal up to relabelling."""
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    if len(labels_a) != len(labels_b):
        raise ValueError(f"partitions differ in length ({len(labels_a)} vs {len(labels_b)})")
    if len(labels_a) < 2:
        raise ValueError("adjusted Rand needs at least 2 items")
    return float(adjusted_rand_score(labels_a, labels_b))


def adjusted_rand_subset(labels_a, labels_b, mask) -> float:
    """Adjusted Rand over the items selected by a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if not (len(mask) == len(labels_a) == len(labels_b)):
        raise ValueError("mask and partitions differ in length")
    if mask.sum() < 2:
        raise ValueError(f"mask selects {int(mask.sum())} items; at least 2 needed")
    return adjusted_rand(labels_a[mask], labels_b[mask])


@dataclass
class BiasReport:
    """One row per parameter; relative_bias is NaN where the true value is 0."""
    table: pd.DataFrame

    @property
    def parameters(self):
        return self.table['parameter'].tolist()

    def row(self, parameter: str) -> pd.Series:
        match = self.table[self.table['parameter'] == parameter]
        if match.empty:
            raise KeyError(parameter)
        return match.iloc[0]

    def relative_bias(self, parameter: str) -> float:
        return float(self.row(parameter)['relative_bias'])

    def to_csv(self, path: str):
        self.table.to_csv(path, index=False, na_rep='NA', float_format='%.10g')
        return path


def _as_mapping(fit, names) -> Mapping[str, Tuple[float, float]]:
    if isinstance(fit, Mapping):
        return fit
    estimates, std_errors = fit
    std_errors = [np.nan] * len(names) if std_errors is None else std_errors
    return {n: (float(e), float(s)) for n, e, s in zip(names, estimates, std_errors)}


def bias_table(true_theta: Mapping[str, float], fits: Sequence) -> BiasReport:
    """Raw and relative bias, empirical SD and mean estimated SE per parameter.

    Each fit is either a mapping parameter -> (estimate, std_error) or an
    (estimates, std_errors) pair ordered like true_theta. Fits are assumed to
    share one class ordering.
    """
    names = list(true_theta)
    fits = [_as_mapping(f, names) for f in fits]
    rows = []
    for name in names:
        truth = float(true_theta[name])
        pairs = [f[name] for f in fits if name in f]
        est = np.array([p[0] for p in pairs], dtype=float)
        se = np.array([p[1] for p in pairs], dtype=float)
        n = len(est)
        mean = float(est.mean()) if n else np.nan
        raw = mean - truth
        rows.append({
            'parameter': name,
            'true_value': truth,
            'mean_estimate': mean,
            'raw_bias': raw,
            'relative_bias': raw / truth if truth != 0 else np.nan,
            'empirical_sd': float(est.std(ddof=1)) if n > 1 else (0.0 if n == 1 else np.nan),
            'mean_estimated_se': float(np.nanmean(se)) if n and np.isfinite(se).any() else np.nan,
            'n_replications': n,
        })
    return BiasReport(pd.DataFrame(rows, columns=BIAS_COLUMNS))


def class_contrast_z(est_1: float, se_1: float, est_2: float, se_2: float) -> Tuple[float, float]:
    """z = (est_1 - est_2) / sqrt(se_1^2 + se_2^2) with a two-sided normal p-value."""
    if se_1 <= 0 or se_2 <= 0:
        raise ValueError("standard errors must be positive")
    z = (est_1 - est_2) / np.sqrt(se_1 ** 2 + se_2 ** 2)
    return float(z), float(2.0 * norm.sf(abs(z)))


def summarize_ari(ari_tables: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    """Mean and SD of overall and alcohol-user ARI per condition."""
    rows = []
    for condition, frame in ari_tables.items():
        row = {'condition': condition, 'n': int(frame['ari'].notna().sum()),
               'mean_ari': frame['ari'].mean(), 'sd_ari': frame['ari'].std(ddof=1)}
        if 'ari_users' in frame:
            row['mean_ari_users'] = frame['ari_users'].mean()
            row['sd_ari_users'] = frame['ari_users'].std(ddof=1)
        rows.append(row)
    return pd.DataFrame(rows)


def relative_bias_reduction(homogeneous: BiasReport, heterogeneous: BiasReport) -> Tuple[int, int]:
    """(parameters where the heterogeneous fit has smaller |relative bias|, parameters compared).

    Only parameters present in both reports with a defined relative bias count.
    """
    hom = homogeneous.table.set_index('parameter')['relative_bias']
    het = heterogeneous.table.set_index('parameter')['relative_bias']
    shared = [p for p in hom.index if p in het.index and np.isfinite(hom[p]) and np.isfinite(het[p])]
    reduced = sum(abs(het[p]) < abs(hom[p]) for p in shared)
    return int(reduced), len(shared)
