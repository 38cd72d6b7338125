"""
Maximum pseudolikelihood (logistic regression over change statistics),
exact likelihood by enumeration for tiny networks, and a Monte-Carlo MLE
refinement with class labels held fixed.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit, logsumexp, softmax

from . import config
from .errors import EstimationError, ModelSpecError
from .network import CovariateTable, DirectedNetwork, dyad_index_arrays
from .sampler import SamplerControls, simulate
from .terms import (ModelSpec, coerce_labels, design_matrix, expanded_sufficient_stats,
                    expanded_sufficient_stats_batch)
from .utils import finite_or_none

logger = logging.getLogger(__name__)

# largest network the enumeration oracle accepts
EXACT_MAX_NODES = 5
_ENUM_CHUNK = 1 << 14


@dataclass
class PseudoFit:
    theta: np.ndarray
    std_errors: np.ndarray
    log_pl: float
    converged: bool
    iterations: int
    param_names: List[str] = field(default_factory=list)
    method: str = 'mple'
    diagnostic: str = ''
    trace: List[float] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    # Monte-Carlo refinement only
    ess: Optional[float] = None
    mc_std_errors: Optional[np.ndarray] = None
    loglik_gain: Optional[float] = None
    mc_state: Optional['McMleState'] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            'method': self.method,
            'converged': bool(self.converged),
            'iterations': int(self.iterations),
            'log_pl': float(self.log_pl),
            'parameters': [
                {'name': name, 'estimate': est, 'std_error': se}
                for name, est, se in zip(self.param_names or [f"theta{k}" for k in range(len(self.theta))],
                                         finite_or_none(self.theta), finite_or_none(self.std_errors))
            ],
            'diagnostic': self.diagnostic,
            'flags': list(self.flags),
        }
        if self.ess is not None:
            out['ess'] = float(self.ess)
            out['loglik_gain'] = None if self.loglik_gain is None else float(self.loglik_gain)
            if self.mc_std_errors is not None:
                out['mc_std_errors'] = finite_or_none(self.mc_std_errors)
        return out


def pseudo_loglik(X, y, theta, offset=None) -> float:
    """Binary logistic log-likelihood of y given linear predictor X @ theta (+ offset)."""
    eta = np.asarray(X) @ np.asarray(theta, dtype=float)
    if offset is not None:
        eta = eta + offset
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _column_diagnostic(X, names) -> str:
    norms = np.linalg.norm(X, axis=0)
    for k in np.flatnonzero(norms == 0):
        return f"column {names[k]} is identically zero"
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return ''
    for k in range(2, X.shape[1] + 1):
        if np.linalg.matrix_rank(X[:, :k]) < k:
            return f"column {names[k - 1]} is collinear with earlier columns"
    return ''


def fit_mple(X, y, offset=None, names: Optional[List[str]] = None, start=None,
             max_iter: int = None, tol: float = None) -> PseudoFit:
    """Newton/IRLS with step-halving for the logistic pseudolikelihood.

    Separation (a parameter drifting past the drift bound) and a singular
    information matrix return a fit flagged not converged, with a diagnostic
    naming the column involved.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    max_iter = config.IRLS_MAX_ITER if max_iter is None else max_iter
    tol = config.IRLS_GRAD_TOL if tol is None else tol
    n, d = X.shape
    names = list(names) if names is not None else [f"theta{k}" for k in range(d)]
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} rows for {d} parameters, got {n}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("response must be binary")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    theta = np.zeros(d) if start is None else np.array(start, dtype=float)
    nan = np.full(d, np.nan)

    diag = _column_diagnostic(X, names)
    if diag:
        logger.debug(f"[MPLE] Singular design: {diag}")
        return PseudoFit(theta, nan, pseudo_loglik(X, y, theta, off), False, 0, names, diagnostic=diag)

    ll = pseudo_loglik(X, y, theta, off)
    trace = [ll]
    converged = False
    diagnostic = ''
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(X @ theta + off)
        grad = X.T @ (y - p)
        if np.linalg.norm(grad) <= tol * (1.0 + abs(ll)):
            converged = True
            it -= 1
            break
        info = X.T @ (X * (p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.isfinite(step).all():
            diagnostic = "singular information matrix; " + (_column_diagnostic(X * np.sqrt(p * (1 - p))[:, None], names)
                                                            or "fitted probabilities reached 0 or 1")
            break
        t = 1.0
        for _ in range(config.IRLS_MAX_HALVINGS + 1):
            candidate = theta + t * step
            ll_new = pseudo_loglik(X, y, candidate, off)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            t *= 0.5
        else:
            diagnostic = "step-halving failed to increase the log pseudolikelihood"
            break
        theta, ll = candidate, ll_new
        trace.append(ll)
        drift = np.flatnonzero(np.abs(theta) > config.DRIFT_BOUND)
        if len(drift):
            k = int(drift[0])
            diagnostic = f"separation: parameter {names[k]} drifted to {theta[k]:.3g}"
            break
    else:
        diagnostic = f"no convergence after {max_iter} iterations"

    se = nan
    if converged:
        p = expit(X @ theta + off)
        info = X.T @ (X * (p * (1.0 - p))[:, None])
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            diagnostic = "information matrix singular at the optimum"
            converged = False
        if converged and np.abs(y - p).max() < 1e-6:
            k = int(np.argmax(np.abs(theta)))
            diagnostic = f"separation: perfect prediction, parameter {names[k]} at {theta[k]:.3g}"
            converged = False
            se = nan
    if not converged:
        logger.debug(f"[MPLE] Not converged after {it} iterations: {diagnostic}")
    return PseudoFit(theta, se, ll, converged, it, names, diagnostic=diagnostic, trace=trace)


def pseudo_loglik_by_class(X, y, class_theta, row_class) -> float:
    """Logistic log-likelihood where row r uses parameter row class_theta[row_class[r]]."""
    eta = np.einsum('rk,rk->r', X, np.asarray(class_theta)[row_class])
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


# --- exact likelihood for tiny networks ---

def _enumerated_stats(n_nodes: int, cov: CovariateTable, spec: ModelSpec, labels) -> np.ndarray:
    """Statistics of all 2^(N(N-1)) graphs on N nodes, in binary-code order."""
    if n_nodes > EXACT_MAX_NODES:
        raise ModelSpecError(f"exact enumeration supports N <= {EXACT_MAX_NODES}, got {n_nodes}")
    s, r = dyad_index_arrays(n_nodes)
    n_dyads = len(s)
    total = 1 << n_dyads
    bits = np.arange(n_dyads, dtype=np.int64)
    out = []
    for start in range(0, total, _ENUM_CHUNK):
        codes = np.arange(start, min(total, start + _ENUM_CHUNK), dtype=np.int64)
        adjs = np.zeros((len(codes), n_nodes, n_nodes))
        adjs[:, s, r] = (codes[:, None] >> bits) & 1
        out.append(expanded_sufficient_stats_batch(adjs, cov, spec, labels.labels))
    return np.vstack(out)


def exact_loglik_small(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec, theta,
                       labels=None) -> float:
    """<theta, s(a)> - log psi(theta), with psi summed over every graph on N nodes."""
    labels = coerce_labels(labels, net.n_nodes, spec.n_classes)
    stats = _enumerated_stats(net.n_nodes, cov, spec, labels)
    theta = np.asarray(theta, dtype=float)
    observed = expanded_sufficient_stats(net, cov, spec, labels.labels)
    return float(observed @ theta - logsumexp(stats @ theta))


def exact_mle_small(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec, labels=None,
                    max_iter: int = 100, tol: float = 1e-10) -> PseudoFit:
    """Newton ascent of the enumerated log-likelihood (gradient s_obs - E[s], Hessian -Cov[s])."""
    labels = coerce_labels(labels, net.n_nodes, spec.n_classes)
    stats = _enumerated_stats(net.n_nodes, cov, spec, labels)
    observed = expanded_sufficient_stats(net, cov, spec, labels.labels)
    names = spec.param_names()

    def loglik(th):
        return float(observed @ th - logsumexp(stats @ th))

    theta = np.zeros(spec.n_params)
    ll = loglik(theta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = softmax(stats @ theta)
        mean = w @ stats
        grad = observed - mean
        if np.linalg.norm(grad) <= tol * (1.0 + abs(ll)):
            converged = True
            it -= 1
            break
        centred = stats - mean
        info = centred.T @ (centred * w[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(config.IRLS_MAX_HALVINGS + 1):
            ll_new = loglik(theta + t * step)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            break
        theta = theta + t * step
        ll = ll_new
        trace.append(ll)
        if np.abs(theta).max() > config.DRIFT_BOUND:
            break
    se = np.full(spec.n_params, np.nan)
    if converged:
        w = softmax(stats @ theta)
        centred = stats - w @ stats
        se = np.sqrt(np.diag(np.linalg.inv(centred.T @ (centred * w[:, None]))))
    return PseudoFit(theta, se, ll, converged, it, names, method='exact', trace=trace)


# --- Monte-Carlo MLE ---

@dataclass
class McMleState:
    """Importance-sampling view of the log-normalizer around theta0.

    sampled_stats are the class-expanded statistics of networks drawn at
    theta0; log_ratio(theta) estimates log psi(theta) - log psi(theta0).
    """
    theta0: np.ndarray
    sampled_stats: np.ndarray
    observed_stats: np.ndarray
    ess: float = float('nan')

    @property
    def n_samples(self) -> int:
        return self.sampled_stats.shape[0]

    def log_ratio(self, theta) -> float:
        delta = np.asarray(theta, dtype=float) - self.theta0
        return float(logsumexp(self.sampled_stats @ delta) - np.log(self.n_samples))

    def loglik_gain(self, theta) -> float:
        """Approximate l(theta) - l(theta0)."""
        delta = np.asarray(theta, dtype=float) - self.theta0
        return float(self.observed_stats @ delta) - self.log_ratio(theta)

    def weights(self, theta) -> np.ndarray:
        delta = np.asarray(theta, dtype=float) - self.theta0
        return softmax(self.sampled_stats @ delta)

    def effective_sample_size(self, theta) -> float:
        w = self.weights(theta)
        return float(1.0 / np.sum(w ** 2))

    def information(self, theta) -> np.ndarray:
        w = self.weights(theta)
        centred = self.sampled_stats - w @ self.sampled_stats
        return centred.T @ (centred * w[:, None])


def _fallback(theta0: PseudoFit, flag: str, diagnostic: str, **extra) -> PseudoFit:
    fit = PseudoFit(theta0.theta.copy(), theta0.std_errors.copy(), theta0.log_pl, theta0.converged,
                    theta0.iterations, list(theta0.param_names), method='mple',
                    diagnostic=diagnostic, trace=list(theta0.trace), flags=list(theta0.flags) + [flag])
    for k, v in extra.items():
        setattr(fit, k, v)
    return fit


def fit_mcmle(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec, labels,
              theta0: PseudoFit, m_samples: int = None, controls=None, seed: int = 0,
              max_iter: int = None) -> PseudoFit:
    """Geyer-Thompson refinement of theta0 with class labels treated as observed.

    Draws m_samples networks at theta0 (chain started at the observed
    network), then maximizes the importance-sampling approximation of the
    log-likelihood. Falls back to theta0 (flag 'ess_fallback') when the
    effective sample size at the optimum drops below the configured floor.
    """
    if not theta0.converged:
        raise EstimationError("MC-MLE needs a converged starting fit")
    labels = coerce_labels(labels, net.n_nodes, spec.n_classes)
    if any(not spec.terms[k].dyad_independent for k in spec.heterogeneous_idx):
        logger.info("[MCMLE] Skipped: heterogeneous dyad-dependent terms have no joint ERGM")
        return _fallback(theta0, 'mcmle_skipped', 'heterogeneous mutual/gwesp terms; MPLE retained')

    m_samples = config.MCMLE_SAMPLES if m_samples is None else int(m_samples)
    max_iter = config.MCMLE_MAX_ITER if max_iter is None else max_iter
    controls = controls or SamplerControls.for_network(net.n_nodes, n_draws=m_samples, seed=seed)
    draws = simulate(spec, cov, theta0.theta, labels, controls, init=net)
    sampled = np.vstack([
        expanded_sufficient_stats_batch(np.stack([d.adjacency for d in draws[k:k + 128]]),
                                        cov, spec, labels.labels)
        for k in range(0, len(draws), 128)])
    observed = expanded_sufficient_stats(net, cov, spec, labels.labels)
    # centring on the observed statistics keeps exponents small
    state = McMleState(theta0.theta.copy(), sampled - observed, np.zeros_like(observed))
    m = state.n_samples

    flat = np.flatnonzero(state.sampled_stats.std(axis=0) == 0)
    if len(flat):
        name = theta0.param_names[int(flat[0])] if theta0.param_names else str(int(flat[0]))
        return _fallback(theta0, 'ess_fallback', f"sampled statistic {name} never varies")

    theta = state.theta0.copy()
    gain = 0.0
    converged = False
    it = 0
    trace = [gain]
    for it in range(1, max_iter + 1):
        w = state.weights(theta)
        grad = -(w @ state.sampled_stats)
        info = state.information(theta)
        if np.linalg.norm(grad) <= config.IRLS_GRAD_TOL * (1.0 + abs(gain)):
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            return _fallback(theta0, 'ess_fallback', 'singular Monte-Carlo information matrix')
        t = 1.0
        for _ in range(config.IRLS_MAX_HALVINGS + 1):
            new_gain = state.loglik_gain(theta + t * step)
            if np.isfinite(new_gain) and new_gain >= gain:
                break
            t *= 0.5
        else:
            break
        theta = theta + t * step
        gain = new_gain
        trace.append(gain)
        if np.abs(theta).max() > config.DRIFT_BOUND:
            break

    ess = state.effective_sample_size(theta)
    state.ess = ess
    if ess < config.MCMLE_ESS_FRACTION * m:
        logger.warning(f"[MCMLE] ESS {ess:.1f} below floor {config.MCMLE_ESS_FRACTION * m:.1f}; keeping MPLE")
        return _fallback(theta0, 'ess_fallback', f"effective sample size {ess:.1f} of {m} draws",
                         ess=ess)
    if not converged:
        logger.warning(f"[MCMLE] Approximate likelihood not maximized after {it} iterations")

    info = state.information(theta)
    try:
        cov_theta = np.linalg.inv(info)
        se = np.sqrt(np.diag(cov_theta))
        mc_se = np.sqrt(np.diag(cov_theta) / ess)
    except np.linalg.LinAlgError:
        return _fallback(theta0, 'ess_fallback', 'singular Monte-Carlo information matrix', ess=ess)

    design = design_matrix(net, cov, spec)
    log_pl = pseudo_loglik_by_class(design.X, design.y, spec.class_theta(theta),
                                    labels.labels[design.classifier(spec.mode)])
    fit = PseudoFit(theta, se, log_pl, converged, it, list(theta0.param_names), method='mcmle',
                    diagnostic='' if converged else 'approximate likelihood not maximized',
                    trace=trace, flags=list(theta0.flags), ess=ess, mc_std_errors=mc_se,
                    loglik_gain=gain, mc_state=state)
    logger.info(f"[MCMLE] Refined {len(theta)} parameters from {m} draws (ESS {ess:.0f}, gain {gain:.4f})")
    return fit
