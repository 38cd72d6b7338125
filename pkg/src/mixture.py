"""
Classification EM for sender/receiver finite-mixture ERGMs.

Each start draws uniform random labels, then alternates an M-step (MPLE on
the class-expanded design) with a hard E-step over the classifying nodes
until the labels stop changing or the classification log pseudolikelihood
settles. The best converged start is canonicalized (classes ordered by
size, then by the edges parameter or, when edges is shared, the first
class-specific term) and optionally refined by MC-MLE with
its labels held fixed.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import softmax

from . import config
from .errors import EstimationError
from .estimation import PseudoFit, fit_mcmle, fit_mple, pseudo_loglik_by_class
from .monitoring import monitor
from .network import CovariateTable, DirectedNetwork
from .terms import DesignMatrix, LabelAssignment, ModelSpec, TermKind, design_matrix
from .utils import derive_seeds, finite_or_none

logger = logging.getLogger(__name__)

__all__ = ['CemControls', 'LabelAssignment', 'MixtureFit', 'canonicalize', 'class_log_pseudolik',
           'e_step', 'expand_design', 'fit_cem']


@dataclass(frozen=True)
class CemControls:
    n_starts: int = config.CEM_N_STARTS
    max_iter: int = config.CEM_MAX_ITER
    tol: float = config.CEM_TOL
    seed: int = 0
    jobs: int = 1
    # None: refine by MC-MLE when the network is small enough
    refine: Optional[bool] = None
    mcmle_samples: int = config.MCMLE_SAMPLES

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class MixtureFit:
    spec: ModelSpec
    assignment: LabelAssignment
    theta: np.ndarray
    std_errors: np.ndarray
    posterior: np.ndarray
    log_cpl: float
    trace: List[float]
    n_starts_used: int
    best_start_seed: int
    iterations: int = 0
    converged: bool = True
    n_dyads: int = 0
    start_diagnostics: List[dict] = field(default_factory=list)
    refined: Optional[PseudoFit] = None

    @property
    def param_names(self) -> List[str]:
        return self.spec.param_names()

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels

    @property
    def alpha(self) -> np.ndarray:
        return self.assignment.alpha

    @property
    def n_free_params(self) -> int:
        return self.spec.n_params + self.spec.n_classes - 1

    @property
    def bic(self) -> float:
        return -2.0 * self.log_cpl + self.n_free_params * np.log(self.n_dyads)

    def final_estimates(self):
        """(theta, std_errors) of the MC-MLE refit when one was made, else of the MPLE."""
        if self.refined is not None and self.refined.method == 'mcmle':
            return self.refined.theta, self.refined.std_errors
        return self.theta, self.std_errors

    def separation(self) -> np.ndarray:
        """Mean of the largest posterior probability among nodes of each class."""
        top = self.posterior.max(axis=1)
        return np.array([top[self.labels == q].mean() if (self.labels == q).any() else np.nan
                         for q in range(self.spec.n_classes)])

    def to_dict(self, include_posterior: bool = False) -> dict:
        theta, se = self.final_estimates()
        out = {
            'model': self.spec.to_dict(),
            'converged': bool(self.converged),
            'log_cpl': float(self.log_cpl),
            'bic': float(self.bic),
            'n_free_params': self.n_free_params,
            'iterations': int(self.iterations),
            'n_starts_used': int(self.n_starts_used),
            'best_start_seed': int(self.best_start_seed),
            'alpha': finite_or_none(self.alpha),
            'class_sizes': self.assignment.sizes().tolist(),
            'separation': finite_or_none(self.separation()),
            'parameters': [
                {'name': n, 'estimate': t, 'std_error': s, 'mple_estimate': m, 'mple_std_error': ms}
                for n, t, s, m, ms in zip(self.param_names, finite_or_none(theta), finite_or_none(se),
                                          finite_or_none(self.theta), finite_or_none(self.std_errors))
            ],
            'labels': self.labels.tolist(),
            'trace': finite_or_none(self.trace),
            'starts': self.start_diagnostics,
        }
        if self.refined is not None:
            out['refit'] = {k: v for k, v in self.refined.to_dict().items() if k != 'parameters'}
        if include_posterior:
            out['posterior'] = np.round(self.posterior, 12).tolist()
        return out


def expand_design(design: DesignMatrix, spec: ModelSpec, labels: LabelAssignment) -> np.ndarray:
    """Homogeneous columns once, then each heterogeneous column per class, zero outside its class."""
    hom, het = spec.homogeneous_idx, spec.heterogeneous_idx
    if not het:
        return design.X[:, hom].copy()
    row_class = labels.labels[design.classifier(spec.mode)]
    blocks = [design.X[:, hom]]
    het_cols = design.X[:, het]
    for q in range(spec.n_classes):
        blocks.append(het_cols * (row_class == q)[:, None])
    return np.hstack(blocks)


def _node_scores(design: DesignMatrix, spec: ModelSpec, theta, alpha, n_nodes: int) -> np.ndarray:
    """N x Q: log alpha_q plus the node's dyad-row log pseudolikelihood under class q."""
    eta = design.X @ spec.class_theta(theta).T
    row_ll = design.y[:, None] * eta - np.logaddexp(0.0, eta)
    nodes = design.classifier(spec.mode)
    scores = np.column_stack([np.bincount(nodes, weights=row_ll[:, q], minlength=n_nodes)
                              for q in range(spec.n_classes)])
    with np.errstate(divide='ignore'):
        return scores + np.log(np.asarray(alpha, dtype=float))[None, :]


def e_step(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec, theta, alpha,
           design: Optional[DesignMatrix] = None):
    """Hard class assignment with posterior membership probabilities.

    Returns (LabelAssignment, posterior). Labels are the posterior argmax
    (lowest index on ties) and alpha is the resulting class frequencies; the
    assignment may leave a class empty.
    """
    design = design if design is not None else design_matrix(net, cov, spec)
    scores = _node_scores(design, spec, theta, alpha, net.n_nodes)
    posterior = softmax(scores, axis=1)
    labels = np.argmax(scores, axis=1)
    return LabelAssignment.from_labels(labels, spec.n_classes, allow_empty=True), posterior


def class_log_pseudolik(design: DesignMatrix, spec: ModelSpec, theta,
                        assignment: LabelAssignment) -> float:
    """Sum of log alpha over node labels plus the label-conditional log pseudolikelihood."""
    with np.errstate(divide='ignore'):
        prior = float(np.log(assignment.alpha)[assignment.labels].sum())
    row_class = assignment.labels[design.classifier(spec.mode)]
    return prior + pseudo_loglik_by_class(design.X, design.y, spec.class_theta(theta), row_class)


@dataclass
class _StartResult:
    start: int
    seed: int
    status: str
    detail: str = ''
    assignment: Optional[LabelAssignment] = None
    posterior: Optional[np.ndarray] = None
    fit: Optional[PseudoFit] = None
    log_cpl: float = float('-inf')
    trace: List[float] = field(default_factory=list)
    iterations: int = 0
    retries: int = 0

    def diagnostics(self) -> dict:
        return {'start': self.start, 'seed': self.seed, 'status': self.status, 'detail': self.detail,
                'log_cpl': float(self.log_cpl) if np.isfinite(self.log_cpl) else None,
                'iterations': self.iterations, 'retries': self.retries}


def _random_assignment(rng, n_nodes: int, n_classes: int) -> Optional[LabelAssignment]:
    labels = rng.integers(0, n_classes, size=n_nodes)
    assignment = LabelAssignment.from_labels(labels, n_classes, allow_empty=True)
    return None if assignment.empty_classes() else assignment


def _run_start(k: int, seed: int, net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec,
               design: DesignMatrix, controls: CemControls) -> _StartResult:
    rng = np.random.default_rng(seed)
    names = spec.param_names()
    result = _StartResult(k, seed, 'failed')
    for attempt in range(config.CEM_EMPTY_CLASS_RETRIES + 1):
        result.retries = attempt
        assignment = _random_assignment(rng, net.n_nodes, spec.n_classes)
        if assignment is None:
            result.detail = 'random start left a class empty'
            continue
        trace: List[float] = []
        fit = None
        posterior = None
        status = 'max_iter'
        emptied = False
        for it in range(1, controls.max_iter + 1):
            X = expand_design(design, spec, assignment)
            fit = fit_mple(X, design.y, names=names, start=None if fit is None else fit.theta)
            if not fit.converged:
                result.status, result.detail, result.iterations = 'failed', f"MPLE: {fit.diagnostic}", it
                result.trace = trace
                return result
            trace.append(class_log_pseudolik(design, spec, fit.theta, assignment))
            new_assignment, posterior = e_step(net, cov, spec, fit.theta, assignment.alpha, design)
            if new_assignment.empty_classes():
                emptied = True
                result.detail = f"E-step emptied classes {new_assignment.empty_classes()}"
                break
            unchanged = np.array_equal(new_assignment.labels, assignment.labels)
            assignment = new_assignment
            settled = len(trace) > 1 and abs(trace[-1] - trace[-2]) < controls.tol * (1.0 + abs(trace[-1]))
            if unchanged or settled:
                status = 'converged'
                break
        if emptied:
            continue
        if not unchanged:
            # theta must belong to the labels being reported
            fit = fit_mple(expand_design(design, spec, assignment), design.y, names=names, start=fit.theta)
            if not fit.converged:
                result.status, result.detail, result.iterations = 'failed', f"MPLE: {fit.diagnostic}", it
                result.trace = trace
                return result
        log_cpl = class_log_pseudolik(design, spec, fit.theta, assignment)
        if log_cpl != trace[-1]:
            trace.append(log_cpl)
        result.status = status
        result.detail = '' if status == 'converged' else f"no convergence after {controls.max_iter} iterations"
        result.assignment, result.posterior, result.fit = assignment, posterior, fit
        result.log_cpl, result.trace, result.iterations = log_cpl, trace, it
        return result
    result.status = 'failed'
    result.detail = f"{result.detail}; gave up after {config.CEM_EMPTY_CLASS_RETRIES} retries"
    return result


def _single_class_fit(net, spec, design, controls) -> MixtureFit:
    fit = fit_mple(design.X, design.y, names=spec.param_names())
    diag = {'start': 0, 'seed': controls.seed, 'status': 'converged' if fit.converged else 'failed',
            'detail': fit.diagnostic, 'log_cpl': fit.log_pl, 'iterations': fit.iterations, 'retries': 0}
    return MixtureFit(spec, LabelAssignment.single_class(net.n_nodes), fit.theta, fit.std_errors,
                      np.ones((net.n_nodes, 1)), fit.log_pl, [fit.log_pl], 1, controls.seed,
                      iterations=fit.iterations, converged=fit.converged, n_dyads=net.n_dyads,
                      start_diagnostics=[diag])


def fit_cem(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec,
            controls: Optional[CemControls] = None) -> MixtureFit:
    """Multi-start classification EM; one-class models reduce to a single MPLE."""
    controls = controls or CemControls()
    design = design_matrix(net, cov, spec)
    if spec.n_classes == 1:
        return _single_class_fit(net, spec, design, controls)

    seeds = derive_seeds(controls.seed, controls.n_starts)
    if controls.jobs > 1:
        with ThreadPoolExecutor(max_workers=controls.jobs) as pool:
            results = list(pool.map(lambda ks: _run_start(ks[0], ks[1], net, cov, spec, design, controls),
                                    enumerate(seeds)))
    else:
        results = [_run_start(k, s, net, cov, spec, design, controls) for k, s in enumerate(seeds)]

    for r in results:
        monitor.send_start_trace(r.start, r.seed, r.status, r.trace)
        logger.debug(f"[CEM] Start {r.start}: {r.status} log_cpl={r.log_cpl:.4f} {r.detail}")
    diagnostics = [r.diagnostics() for r in results]

    pool_ok = [r for r in results if r.status == 'converged']
    if not pool_ok:
        pool_ok = [r for r in results if r.status == 'max_iter']
        if pool_ok:
            logger.warning("[CEM] No start converged; selecting among starts that hit max_iter")
    if not pool_ok:
        raise EstimationError(f"all {len(results)} starts failed", diagnostics)
    best = sorted(pool_ok, key=lambda r: (-r.log_cpl, r.seed))[0]

    fit = MixtureFit(spec, best.assignment, best.fit.theta, best.fit.std_errors, best.posterior,
                     best.log_cpl, best.trace, len(results), best.seed, iterations=best.iterations,
                     converged=best.status == 'converged', n_dyads=net.n_dyads,
                     start_diagnostics=diagnostics)
    fit = canonicalize(fit)
    logger.info(f"[CEM] Best of {len(results)} starts: log_cpl={fit.log_cpl:.4f}, "
                f"class sizes {fit.assignment.sizes().tolist()}")

    refine = controls.refine if controls.refine is not None else net.n_nodes <= config.MCMLE_MAX_NODES
    if refine and not fit.converged:
        logger.warning("[CEM] Skipping MC-MLE refinement: classification EM did not converge")
    elif refine:
        row_class = fit.labels[design.classifier(spec.mode)]
        log_pl = pseudo_loglik_by_class(design.X, design.y, spec.class_theta(fit.theta), row_class)
        mple = PseudoFit(fit.theta, fit.std_errors, log_pl, fit.converged, fit.iterations, fit.param_names)
        fit.refined = fit_mcmle(net, cov, spec, fit.assignment, mple, m_samples=controls.mcmle_samples,
                                seed=derive_seeds(controls.seed, controls.n_starts + 1)[-1])
    return fit


def _class_order(fit: MixtureFit) -> np.ndarray:
    spec = fit.spec
    sizes = fit.assignment.sizes()
    class_theta = spec.class_theta(fit.theta)
    het = spec.heterogeneous_idx
    edges = [k for k in het if spec.terms[k].kind is TermKind.EDGES]
    key_term = edges[0] if edges else het[0]
    # lexsort: last key is primary
    return np.lexsort((class_theta[:, key_term], -sizes))


def _permute_blocks(spec: ModelSpec, vec, order) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    n_hom, n_het = len(spec.homogeneous_idx), len(spec.heterogeneous_idx)
    blocks = [vec[:n_hom]] + [vec[n_hom + q * n_het:n_hom + (q + 1) * n_het] for q in order]
    return np.concatenate(blocks)


def canonicalize(fit: MixtureFit) -> MixtureFit:
    """Order classes by descending size, ties by ascending edges parameter.

    When edges is homogeneous the first heterogeneous term breaks ties.
    """
    order = _class_order(fit)
    if np.array_equal(order, np.arange(len(order))):
        return fit
    spec = fit.spec
    refined = fit.refined
    if refined is not None:
        refined = replace(refined, theta=_permute_blocks(spec, refined.theta, order),
                          std_errors=_permute_blocks(spec, refined.std_errors, order),
                          mc_std_errors=None if refined.mc_std_errors is None
                          else _permute_blocks(spec, refined.mc_std_errors, order),
                          mc_state=None)
    return replace(fit, assignment=fit.assignment.permuted(order),
                   theta=_permute_blocks(spec, fit.theta, order),
                   std_errors=_permute_blocks(spec, fit.std_errors, order),
                   posterior=fit.posterior[:, order], refined=refined)
