"""
ERGM terms: specifications, sufficient statistics and change statistics.

Supported terms are edges, mutual, gwesp (outgoing two-path shared partners
with a fixed decay), nodematch, sendercov, receivercov and absdiff. Every
statistic is a sum of per-edge contributions, which is what lets the
mixture code attribute a heterogeneous statistic to the class of the
classifying node.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyClassError, ModelSpecError
from .network import CATEGORICAL, CONTINUOUS, CovariateTable, DirectedNetwork, Dyad, dyad_index_arrays
from .utils import read_json

logger = logging.getLogger(__name__)


class TermKind(Enum):
    EDGES = 'edges'
    MUTUAL = 'mutual'
    GWESP = 'gwesp'
    NODEMATCH = 'nodematch'
    SENDERCOV = 'sendercov'
    RECEIVERCOV = 'receivercov'
    ABSDIFF = 'absdiff'


class Mode(Enum):
    SENDER = 'sender'
    RECEIVER = 'receiver'


COVARIATE_KINDS = {
    TermKind.NODEMATCH: CATEGORICAL,
    TermKind.SENDERCOV: CONTINUOUS,
    TermKind.RECEIVERCOV: CONTINUOUS,
    TermKind.ABSDIFF: CONTINUOUS,
}
DYAD_DEPENDENT = (TermKind.MUTUAL, TermKind.GWESP)


@dataclass(frozen=True)
class TermSpec:
    kind: TermKind
    covariate: Optional[str] = None
    decay: Optional[float] = None
    heterogeneous: bool = False

    def __post_init__(self):
        if not isinstance(self.kind, TermKind):
            try:
                object.__setattr__(self, 'kind', TermKind(str(self.kind).lower()))
            except ValueError:
                raise ModelSpecError(f"unknown term kind {self.kind!r}") from None
        if self.kind in COVARIATE_KINDS:
            if not self.covariate:
                raise ModelSpecError(f"{self.kind.value} needs a covariate column")
        elif self.covariate is not None:
            raise ModelSpecError(f"{self.kind.value} takes no covariate")
        if self.kind is TermKind.GWESP:
            if self.decay is None or not np.isfinite(self.decay) or self.decay < 0:
                raise ModelSpecError("gwesp needs a finite decay >= 0")
            object.__setattr__(self, 'decay', float(self.decay))
        elif self.decay is not None:
            raise ModelSpecError(f"{self.kind.value} takes no decay")
        object.__setattr__(self, 'heterogeneous', bool(self.heterogeneous))

    @property
    def label(self) -> str:
        if self.covariate:
            return f"{self.kind.value}.{self.covariate}"
        return self.kind.value

    @property
    def dyad_independent(self) -> bool:
        return self.kind not in DYAD_DEPENDENT

    def to_dict(self) -> dict:
        d = {'kind': self.kind.value}
        if self.covariate is not None:
            d['covariate'] = self.covariate
        if self.decay is not None:
            d['decay'] = self.decay
        d['heterogeneous'] = self.heterogeneous
        return d


@dataclass(frozen=True)
class ModelSpec:
    """Ordered terms, class count Q and the mixture mode.

    Parameter layout is the homogeneous block (terms in model order) followed
    by Q blocks of the heterogeneous terms.
    """
    terms: Tuple[TermSpec, ...]
    n_classes: int = 1
    mode: Mode = Mode.SENDER

    def __post_init__(self):
        object.__setattr__(self, 'terms', tuple(self.terms))
        if not isinstance(self.mode, Mode):
            try:
                object.__setattr__(self, 'mode', Mode(str(self.mode).lower()))
            except ValueError:
                raise ModelSpecError(f"mode must be 'sender' or 'receiver', got {self.mode!r}") from None
        if not self.terms:
            raise ModelSpecError("model needs at least one term")
        if sum(t.kind is TermKind.EDGES for t in self.terms) > 1:
            raise ModelSpecError("at most one edges term")
        labels = [t.label for t in self.terms]
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            raise ModelSpecError(f"duplicate terms {dupes}")
        if int(self.n_classes) < 1:
            raise ModelSpecError("n_classes must be >= 1")
        object.__setattr__(self, 'n_classes', int(self.n_classes))
        n_het = sum(t.heterogeneous for t in self.terms)
        if self.n_classes == 1 and n_het:
            raise ModelSpecError("a one-class model cannot have heterogeneous terms")
        if self.n_classes > 1 and not n_het:
            raise ModelSpecError(f"{self.n_classes} classes need at least one heterogeneous term")

    # --- layout ---
    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def homogeneous_idx(self) -> List[int]:
        return [k for k, t in enumerate(self.terms) if not t.heterogeneous]

    @property
    def heterogeneous_idx(self) -> List[int]:
        return [k for k, t in enumerate(self.terms) if t.heterogeneous]

    @property
    def n_params(self) -> int:
        return len(self.homogeneous_idx) + self.n_classes * len(self.heterogeneous_idx)

    @property
    def labels(self) -> List[str]:
        return [t.label for t in self.terms]

    @property
    def dyad_independent(self) -> bool:
        return all(t.dyad_independent for t in self.terms)

    def param_names(self) -> List[str]:
        names = [self.terms[k].label for k in self.homogeneous_idx]
        for q in range(self.n_classes):
            names += [f"{self.terms[k].label}:class{q + 1}" for k in self.heterogeneous_idx]
        return names

    def term_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ModelSpecError(f"no term {label!r} in model") from None

    def class_theta(self, theta) -> np.ndarray:
        """Q x d matrix: row q is the per-term parameter vector seen by class q."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ModelSpecError(f"theta has length {theta.size}, model needs {self.n_params}")
        hom, het = self.homogeneous_idx, self.heterogeneous_idx
        out = np.empty((self.n_classes, self.n_terms))
        out[:, hom] = theta[:len(hom)]
        for q in range(self.n_classes):
            start = len(hom) + q * len(het)
            out[q, het] = theta[start:start + len(het)]
        return out

    def homogeneous(self) -> 'ModelSpec':
        """Same terms fit as a one-class model."""
        return ModelSpec(tuple(TermSpec(t.kind, t.covariate, t.decay, False) for t in self.terms),
                         1, self.mode)

    def with_heterogeneous(self, labels: Sequence[str], n_classes: int) -> 'ModelSpec':
        labels = set(labels)
        unknown = labels - set(self.labels)
        if unknown:
            raise ModelSpecError(f"no terms {sorted(unknown)} in model")
        terms = tuple(TermSpec(t.kind, t.covariate, t.decay, t.label in labels) for t in self.terms)
        return ModelSpec(terms, n_classes if labels else 1, self.mode)

    # --- validation against data ---
    def validate(self, cov: Optional[CovariateTable]):
        for t in self.terms:
            if t.kind not in COVARIATE_KINDS:
                continue
            if cov is None or t.covariate not in cov.names:
                raise ModelSpecError(f"{t.label}: covariate column {t.covariate!r} not found")
            want = COVARIATE_KINDS[t.kind]
            if cov.kind(t.covariate) != want:
                raise ModelSpecError(f"{t.label}: column {t.covariate!r} must be {want}, "
                                     f"is {cov.kind(t.covariate)}")

    # --- JSON ---
    def to_dict(self) -> dict:
        return {'mode': self.mode.value, 'classes': self.n_classes,
                'terms': [t.to_dict() for t in self.terms]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> 'ModelSpec':
        if not isinstance(payload, dict) or not isinstance(payload.get('terms'), list):
            raise ModelSpecError("model spec must be an object with a 'terms' list")
        terms = []
        for i, t in enumerate(payload['terms']):
            if not isinstance(t, dict) or 'kind' not in t:
                raise ModelSpecError(f"term {i}: expected an object with 'kind'")
            extra = set(t) - {'kind', 'covariate', 'decay', 'heterogeneous'}
            if extra:
                raise ModelSpecError(f"term {i}: unknown fields {sorted(extra)}")
            terms.append(TermSpec(t['kind'], t.get('covariate'), t.get('decay'),
                                  t.get('heterogeneous', False)))
        return cls(tuple(terms), payload.get('classes', 1), payload.get('mode', 'sender'))


def load_model_spec(path: str) -> ModelSpec:
    try:
        payload = read_json(path)
    except json.JSONDecodeError as e:
        raise ModelSpecError(f"{path}: malformed JSON ({e})") from None
    return ModelSpec.from_dict(payload)


def save_model_spec(spec: ModelSpec, path: str):
    with open(path, 'w') as f:
        f.write(spec.to_json() + '\n')
    return path


# --- per-edge contributions and sufficient statistics ---

def gwesp_weight(ep, decay: float):
    """e^tau * (1 - (1 - e^-tau)^ep); w(p+1) - w(p) = (1 - e^-tau)^p."""
    r = 1.0 - np.exp(-decay)
    return np.exp(decay) * (1.0 - np.power(r, ep))


def _covariate(cov: CovariateTable, term: TermSpec) -> np.ndarray:
    return np.asarray(cov.values(term.covariate), dtype=float)


def _edge_weights(adjs: np.ndarray, cov: CovariateTable, term: TermSpec) -> np.ndarray:
    """(M, N, N) value of each present edge's contribution to the term's statistic."""
    kind = term.kind
    if kind is TermKind.EDGES:
        return adjs
    if kind is TermKind.MUTUAL:
        return adjs * np.swapaxes(adjs, 1, 2) / 2.0
    if kind is TermKind.GWESP:
        return adjs * gwesp_weight(np.matmul(adjs, adjs), term.decay)
    x = _covariate(cov, term)
    if kind is TermKind.NODEMATCH:
        return adjs * (x[:, None] == x[None, :])
    if kind is TermKind.SENDERCOV:
        return adjs * x[:, None]
    if kind is TermKind.RECEIVERCOV:
        return adjs * x[None, :]
    return adjs * np.abs(x[:, None] - x[None, :])


def _as_batch(adjs) -> np.ndarray:
    adjs = np.asarray(adjs, dtype=float)
    if adjs.ndim == 2:
        adjs = adjs[None]
    return adjs


def sufficient_stats_batch(adjs, cov: CovariateTable, spec: ModelSpec) -> np.ndarray:
    """(M, d) statistics for a stack of M adjacency matrices."""
    spec.validate(cov)
    adjs = _as_batch(adjs)
    out = np.empty((adjs.shape[0], spec.n_terms))
    for k, term in enumerate(spec.terms):
        out[:, k] = _edge_weights(adjs, cov, term).sum(axis=(1, 2))
    return out


def sufficient_stats(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec) -> np.ndarray:
    return sufficient_stats_batch(net.adjacency, cov, spec)[0]


def expanded_sufficient_stats_batch(adjs, cov: CovariateTable, spec: ModelSpec, labels) -> np.ndarray:
    """(M, d') class-expanded statistics with labels held fixed.

    A heterogeneous term's statistic is split by the class of each edge's
    classifying node (sender in sender mode, receiver in receiver mode).
    """
    spec.validate(cov)
    adjs = _as_batch(adjs)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.eye(spec.n_classes)[labels]
    hom, het = spec.homogeneous_idx, spec.heterogeneous_idx
    out = np.empty((adjs.shape[0], spec.n_params))
    for pos, k in enumerate(hom):
        out[:, pos] = _edge_weights(adjs, cov, spec.terms[k]).sum(axis=(1, 2))
    axis = 2 if spec.mode is Mode.SENDER else 1
    for pos, k in enumerate(het):
        per_node = _edge_weights(adjs, cov, spec.terms[k]).sum(axis=axis)
        per_class = per_node @ onehot
        for q in range(spec.n_classes):
            out[:, len(hom) + q * len(het) + pos] = per_class[:, q]
    return out


def expanded_sufficient_stats(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec,
                              labels) -> np.ndarray:
    return expanded_sufficient_stats_batch(net.adjacency, cov, spec, labels)[0]


# --- change statistics ---

def change_stat_oracle(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec,
                       dyad: Dyad) -> np.ndarray:
    """s(a with a_ij = 1) - s(a with a_ij = 0), by recomputing both statistics."""
    on = net.with_edge(dyad.sender, dyad.receiver, 1)
    off = net.with_edge(dyad.sender, dyad.receiver, 0)
    return sufficient_stats(on, cov, spec) - sufficient_stats(off, cov, spec)


def gwesp_change(adj: np.ndarray, i: int, j: int, decay: float, ep_row=None, ep_col=None) -> float:
    """Gwesp change statistic for dyad (i, j) touching only rows and columns near i and j.

    ep_row / ep_col may carry the current shared-partner counts EP[i, :] and
    EP[:, j] when the caller maintains them.
    """
    r = 1.0 - np.exp(-decay)
    a = adj.astype(bool, copy=False)
    aij = int(a[i, j])
    out_both = np.flatnonzero(a[i] & a[j])
    in_both = np.flatnonzero(a[:, i] & a[:, j])
    if ep_row is None:
        ep_ij = int(np.count_nonzero(a[i] & a[:, j]))
        ep_ik = a[:, out_both].T.astype(np.int64) @ a[i].astype(np.int64)
        ep_kj = a[in_both].astype(np.int64) @ a[:, j].astype(np.int64)
    else:
        ep_ij = int(ep_row[j])
        ep_ik = ep_row[out_both]
        ep_kj = ep_col[in_both]
    total = float(gwesp_weight(ep_ij, decay))
    total += float(np.power(r, np.asarray(ep_ik, dtype=float) - aij).sum())
    total += float(np.power(r, np.asarray(ep_kj, dtype=float) - aij).sum())
    return total


def change_stat_fast(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec,
                     dyad: Dyad) -> np.ndarray:
    """Change statistics for one dyad from local quantities only."""
    adj = net.adjacency
    i, j = dyad.sender, dyad.receiver
    out = np.empty(spec.n_terms)
    for k, term in enumerate(spec.terms):
        kind = term.kind
        if kind is TermKind.EDGES:
            out[k] = 1.0
        elif kind is TermKind.MUTUAL:
            out[k] = float(adj[j, i])
        elif kind is TermKind.GWESP:
            out[k] = gwesp_change(adj, i, j, term.decay)
        else:
            x = cov.values(term.covariate)
            if kind is TermKind.NODEMATCH:
                out[k] = float(x[i] == x[j])
            elif kind is TermKind.SENDERCOV:
                out[k] = float(x[i])
            elif kind is TermKind.RECEIVERCOV:
                out[k] = float(x[j])
            else:
                out[k] = abs(float(x[i]) - float(x[j]))
    return out


def gwesp_change_matrix(adj, decay: float) -> np.ndarray:
    """N x N matrix of gwesp change statistics for every dyad of the current network."""
    a = np.asarray(adj, dtype=float)
    r = 1.0 - np.exp(-decay)
    ep = a @ a
    rp = np.power(r, ep)
    rp1 = np.where(ep >= 1, np.power(r, np.maximum(ep - 1, 0)), 0.0)
    present = a == 1
    via_out = np.where(present, (a * rp1) @ a.T, (a * rp) @ a.T)
    via_in = np.where(present, a.T @ (a * rp1), a.T @ (a * rp))
    change = gwesp_weight(ep, decay) + via_out + via_in
    np.fill_diagonal(change, 0.0)
    return change


@dataclass(frozen=True)
class ChangeStatRow:
    dyad: Dyad
    stats: np.ndarray


@dataclass
class DesignMatrix:
    """Change statistics for every dyad in dyad_iter order, plus the response."""
    X: np.ndarray
    y: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    names: List[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def rows(self) -> Iterator[ChangeStatRow]:
        for r in range(self.n_rows):
            yield ChangeStatRow(Dyad(int(self.senders[r]), int(self.receivers[r])), self.X[r])

    def classifier(self, mode: Mode) -> np.ndarray:
        """Node whose class governs each row: the sender in sender mode, else the receiver."""
        return self.senders if mode is Mode.SENDER else self.receivers


def design_matrix(net: DirectedNetwork, cov: CovariateTable, spec: ModelSpec) -> DesignMatrix:
    spec.validate(cov)
    adj = net.adjacency
    s, r = dyad_index_arrays(net.n_nodes)
    X = np.empty((len(s), spec.n_terms))
    for k, term in enumerate(spec.terms):
        kind = term.kind
        if kind is TermKind.EDGES:
            X[:, k] = 1.0
        elif kind is TermKind.MUTUAL:
            X[:, k] = adj[r, s]
        elif kind is TermKind.GWESP:
            X[:, k] = gwesp_change_matrix(adj, term.decay)[s, r]
        else:
            x = _covariate(cov, term)
            if kind is TermKind.NODEMATCH:
                X[:, k] = x[s] == x[r]
            elif kind is TermKind.SENDERCOV:
                X[:, k] = x[s]
            elif kind is TermKind.RECEIVERCOV:
                X[:, k] = x[r]
            else:
                X[:, k] = np.abs(x[s] - x[r])
    y = adj[s, r].astype(float)
    return DesignMatrix(X, y, s, r, spec.labels)


@dataclass(frozen=True)
class LabelAssignment:
    """Hard class labels (0..Q-1) for every node plus class proportions alpha.

    Assignments used for fitting or simulation have every class occupied;
    an assignment step may still produce an empty class, which callers
    detect with empty_classes().
    """
    labels: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        alpha = np.asarray(self.alpha, dtype=float).copy()
        if labels.ndim != 1 or len(labels) < 1:
            raise ValueError("labels must be a non-empty vector")
        if alpha.ndim != 1 or (alpha < 0).any() or abs(alpha.sum() - 1.0) > 1e-9:
            raise ValueError(f"alpha must lie on the simplex, got {alpha}")
        if labels.min() < 0 or labels.max() >= len(alpha):
            raise ValueError(f"labels must lie in 0..{len(alpha) - 1}")
        labels.flags.writeable = False
        alpha.flags.writeable = False
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'alpha', alpha)

    @classmethod
    def from_labels(cls, labels, n_classes: int, allow_empty: bool = False) -> 'LabelAssignment':
        """Alpha set to the hard-label class frequencies."""
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=n_classes)[:n_classes]
        assignment = cls(labels, counts / counts.sum())
        if not allow_empty:
            assignment.require_all_classes()
        return assignment

    def empty_classes(self):
        return np.flatnonzero(self.sizes() == 0).tolist()

    def require_all_classes(self):
        empty = self.empty_classes()
        if empty:
            raise EmptyClassError(f"classes {empty} have no nodes", empty)
        return self

    @classmethod
    def single_class(cls, n_nodes: int) -> 'LabelAssignment':
        return cls(np.zeros(n_nodes, dtype=np.int64), np.ones(1))

    @property
    def n_classes(self) -> int:
        return len(self.alpha)

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def permuted(self, order) -> 'LabelAssignment':
        """New assignment where new class c is old class order[c]."""
        order = np.asarray(order, dtype=np.int64)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return LabelAssignment(inverse[self.labels], self.alpha[order])


def coerce_labels(labels, n_nodes: int, n_classes: int) -> LabelAssignment:
    """Accept a LabelAssignment, a raw label vector, or None for one-class models."""
    if labels is None:
        if n_classes != 1:
            raise ModelSpecError(f"a {n_classes}-class model needs class labels")
        return LabelAssignment.single_class(n_nodes)
    if not isinstance(labels, LabelAssignment):
        labels = LabelAssignment.from_labels(labels, n_classes)
    if labels.n_nodes != n_nodes:
        raise ModelSpecError(f"{labels.n_nodes} labels for a {n_nodes}-node network")
    if labels.n_classes != n_classes:
        raise ModelSpecError(f"labels have {labels.n_classes} classes, model has {n_classes}")
    return labels
