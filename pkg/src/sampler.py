"""
Gibbs edge-toggle sampler for homogeneous and sender/receiver mixture ERGMs.

Each step picks a dyad uniformly at random and redraws its state from the
full conditional logistic(<theta_q, s_ij>), where q is the class of the
dyad's classifying node. Dyad-independent terms are folded into a static
N x N predictor; mutual and gwesp contributions are evaluated against the
current state, with shared-partner counts kept up to date on every toggle.
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from . import config
from .errors import DegeneracyError
from .monitoring import monitor
from .network import CovariateTable, DirectedNetwork, save_network
from .terms import (LabelAssignment, Mode, ModelSpec, TermKind, coerce_labels, gwesp_change,
                    sufficient_stats_batch)

logger = logging.getLogger(__name__)

# random numbers are drawn in blocks of this many steps
_BLOCK = 65536


@dataclass(frozen=True)
class SamplerControls:
    burn_in: int
    thin: int
    n_draws: int
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")

    @classmethod
    def for_network(cls, n_nodes: int, n_draws: int = 1, seed: int = 0,
                    burn_in_factor: float = None, thin_factor: float = None) -> 'SamplerControls':
        """Defaults scaled by the dyad count: burn-in 20 N(N-1), thin N(N-1)."""
        n_dyads = n_nodes * (n_nodes - 1)
        burn_in_factor = config.BURN_IN_FACTOR if burn_in_factor is None else burn_in_factor
        thin_factor = config.THIN_FACTOR if thin_factor is None else thin_factor
        return cls(burn_in=int(burn_in_factor * n_dyads), thin=max(1, int(thin_factor * n_dyads)),
                   n_draws=n_draws, seed=seed)


class _Chain:
    """One private mutable network plus the per-dyad pieces of the linear predictor."""

    def __init__(self, spec: ModelSpec, cov: CovariateTable, theta, labels: LabelAssignment,
                 init: Optional[DirectedNetwork]):
        n = cov.n_nodes
        class_theta = spec.class_theta(theta)
        # class of the classifying node for every dyad
        if spec.mode is Mode.SENDER:
            klass = np.repeat(labels.labels[:, None], n, axis=1)
        else:
            klass = np.repeat(labels.labels[None, :], n, axis=0)

        eta = np.zeros((n, n))
        self.mutual_coef = None
        self.gwesp_coef = None
        self.decay = None
        for k, term in enumerate(spec.terms):
            coef = class_theta[klass, k]
            kind = term.kind
            if kind is TermKind.MUTUAL:
                self.mutual_coef = coef
                continue
            if kind is TermKind.GWESP:
                self.gwesp_coef = coef
                self.decay = term.decay
                continue
            if kind is TermKind.EDGES:
                eta += coef
                continue
            x = np.asarray(cov.values(term.covariate), dtype=float)
            if kind is TermKind.NODEMATCH:
                eta += coef * (x[:, None] == x[None, :])
            elif kind is TermKind.SENDERCOV:
                eta += coef * x[:, None]
            elif kind is TermKind.RECEIVERCOV:
                eta += coef * x[None, :]
            else:
                eta += coef * np.abs(x[:, None] - x[None, :])
        self.eta_static = eta
        self.n = n
        if init is None:
            self.adj = np.zeros((n, n), dtype=bool)
        else:
            self.adj = init.copy_adjacency().astype(bool)
        self.ep = None
        if self.gwesp_coef is not None:
            a = self.adj.astype(np.int64)
            self.ep = a @ a

    def predictor(self, i: int, j: int) -> float:
        eta = self.eta_static[i, j]
        if self.mutual_coef is not None and self.adj[j, i]:
            eta += self.mutual_coef[i, j]
        if self.gwesp_coef is not None:
            eta += self.gwesp_coef[i, j] * gwesp_change(self.adj, i, j, self.decay,
                                                       self.ep[i], self.ep[:, j])
        return float(eta)

    def set(self, i: int, j: int, value: bool):
        if self.adj[i, j] == value:
            return
        self.adj[i, j] = value
        if self.ep is not None:
            delta = 1 if value else -1
            self.ep[i, :] += delta * self.adj[j, :]
            self.ep[:, j] += delta * self.adj[:, i]

    def snapshot(self) -> DirectedNetwork:
        return DirectedNetwork(self.adj.astype(np.uint8))


def simulate(spec: ModelSpec, cov: CovariateTable, theta, labels=None,
             controls: Optional[SamplerControls] = None,
             init: Optional[DirectedNetwork] = None) -> List[DirectedNetwork]:
    """Draw networks from the model at theta with class labels held fixed.

    Starts from the empty network unless `init` is given; retains every
    `thin`-th state after `burn_in` toggles. Raises DegeneracyError on a
    non-finite linear predictor.
    """
    spec.validate(cov)
    n = cov.n_nodes
    if init is not None and init.n_nodes != n:
        raise ValueError(f"initial network has {init.n_nodes} nodes, covariates have {n}")
    labels = coerce_labels(labels, n, spec.n_classes)
    controls = controls or SamplerControls.for_network(n)
    chain = _Chain(spec, cov, theta, labels, init)

    rng = np.random.default_rng(controls.seed)
    n_dyads = n * (n - 1)
    total = controls.burn_in + controls.thin * controls.n_draws
    draws: List[DirectedNetwork] = []
    step = 0
    while step < total:
        block = min(_BLOCK, total - step)
        picks = rng.integers(0, n_dyads, size=block)
        uniforms = rng.random(block)
        for idx, u in zip(picks.tolist(), uniforms.tolist()):
            i, jj = divmod(idx, n - 1)
            j = jj + (jj >= i)
            eta = chain.predictor(i, j)
            if not math.isfinite(eta):
                monitor.send_sampler_diagnostic('non-finite linear predictor', dyad=[i, j],
                                                step=step, eta=str(eta))
                raise DegeneracyError(f"non-finite linear predictor {eta} at dyad ({i},{j}) "
                                      f"after {step} toggles", dyad=(i, j), eta=eta)
            p = 1.0 / (1.0 + math.exp(-eta)) if eta > -700 else 0.0
            chain.set(i, j, u < p)
            step += 1
            if step > controls.burn_in and (step - controls.burn_in) % controls.thin == 0:
                draws.append(chain.snapshot())
    density = chain.adj.sum() / n_dyads
    if density in (0.0, 1.0) and n_dyads > 2:
        logger.warning(f"[Sampler] Chain ended at a {'full' if density else 'empty'} network")
        monitor.send_sampler_diagnostic('degenerate final state', density=float(density))
    logger.debug(f"[Sampler] {len(draws)} draws after {total} toggles (final density {density:.4f})")
    return draws


def plant_classes(n_nodes: int, q_proportions: Sequence[float], seed: int) -> LabelAssignment:
    """Random labels with class sizes given by largest-remainder rounding of N * proportions."""
    props = np.asarray(q_proportions, dtype=float)
    if props.ndim != 1 or (props < 0).any() or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"class proportions must lie on the simplex, got {list(props)}")
    raw = n_nodes * props
    counts = np.floor(raw).astype(np.int64)
    shortfall = n_nodes - counts.sum()
    # stable sort keeps the lowest index first among equal remainders
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:shortfall]] += 1
    labels = np.repeat(np.arange(len(props)), counts)
    labels = np.random.default_rng(seed).permutation(labels)
    return LabelAssignment.from_labels(labels, len(props))


def edge_frequencies(draws: Sequence[DirectedNetwork]) -> np.ndarray:
    """Share of draws containing each edge."""
    return np.mean([d.adjacency for d in draws], axis=0)


def write_draws(draws: Sequence[DirectedNetwork], out_dir: str, spec: Optional[ModelSpec] = None,
                cov: Optional[CovariateTable] = None, one_based: bool = False) -> List[str]:
    """Numbered edge-list CSVs plus statistics.csv (one row of sufficient statistics per draw)."""
    os.makedirs(out_dir, exist_ok=True)
    width = max(4, len(str(len(draws))))
    paths = [save_network(d, os.path.join(out_dir, f"draw_{k + 1:0{width}d}.csv"), one_based=one_based)
             for k, d in enumerate(draws)]
    if spec is not None and len(draws):
        stats = np.vstack([sufficient_stats_batch(np.stack([d.adjacency for d in draws[k:k + 128]]),
                                                  cov, spec)
                           for k in range(0, len(draws), 128)])
        frame = pd.DataFrame(stats, columns=spec.labels)
        frame.insert(0, 'draw', np.arange(1, len(draws) + 1))
        frame.to_csv(os.path.join(out_dir, 'statistics.csv'), index=False)
    return paths
