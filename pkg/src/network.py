"""
Directed network and covariate containers.

Both containers are immutable after construction: their arrays are flagged
read-only so they can be shared between threads and worker processes. The
sampler works on a private mutable copy of the adjacency matrix.
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import CovariateError, NetworkFormatError

logger = logging.getLogger(__name__)

CATEGORICAL = 'categorical'
CONTINUOUS = 'continuous'
COLUMN_KINDS = (CATEGORICAL, CONTINUOUS)


@dataclass(frozen=True)
class Dyad:
    """Ordered pair (sender, receiver); (i, j) and (j, i) are different dyads."""
    sender: int
    receiver: int

    def __post_init__(self):
        if self.sender == self.receiver:
            raise ValueError(f"dyad ({self.sender},{self.receiver}) is a self-loop")


class DirectedNetwork:
    """Binary directed network on nodes 0..N-1 without self-loops."""

    def __init__(self, adjacency, id_offset: int = 0):
        raw = np.asarray(adjacency)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise NetworkFormatError(f"adjacency must be square, got shape {raw.shape}")
        if raw.shape[0] < 2:
            raise NetworkFormatError("a network needs at least 2 nodes")
        if not np.isin(raw, (0, 1)).all():
            raise NetworkFormatError("adjacency entries must be 0 or 1")
        adj = raw.astype(np.uint8, copy=True)
        if adj.diagonal().any():
            raise NetworkFormatError(f"self-loop at node {int(np.flatnonzero(adj.diagonal())[0])}")
        adj.flags.writeable = False
        self._adj = adj
        self.n_nodes = adj.shape[0]
        # 0 when external ids were 0-based, 1 when they were 1-based
        self.id_offset = int(id_offset)

    @classmethod
    def from_edges(cls, n_nodes: int, edges, id_offset: int = 0) -> 'DirectedNetwork':
        if n_nodes < 2:
            raise NetworkFormatError("a network needs at least 2 nodes")
        adj = np.zeros((n_nodes, n_nodes), dtype=np.uint8)
        edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= n_nodes:
                raise NetworkFormatError(f"node id out of range for n_nodes={n_nodes}")
            if (edges[:, 0] == edges[:, 1]).any():
                raise NetworkFormatError("self-loop in edge list")
            adj[edges[:, 0], edges[:, 1]] = 1
        return cls(adj, id_offset=id_offset)

    @classmethod
    def empty(cls, n_nodes: int) -> 'DirectedNetwork':
        return cls(np.zeros((n_nodes, n_nodes), dtype=np.uint8))

    @property
    def adjacency(self) -> np.ndarray:
        """Read-only N x N uint8 matrix."""
        return self._adj

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self._adj[i, j])

    def out_degree(self) -> np.ndarray:
        return self._adj.sum(axis=1, dtype=np.int64)

    def in_degree(self) -> np.ndarray:
        return self._adj.sum(axis=0, dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return int(self._adj.sum(dtype=np.int64))

    @property
    def n_dyads(self) -> int:
        return self.n_nodes * (self.n_nodes - 1)

    def density(self) -> float:
        return self.n_edges / self.n_dyads

    def reciprocity(self) -> int:
        """Number of mutual dyads (i<j with both i->j and j->i)."""
        a = self._adj.astype(np.int64)
        return int((a * a.T).sum() // 2)

    def edges(self) -> np.ndarray:
        """(E, 2) array of (sender, receiver), sender-major order."""
        return np.argwhere(self._adj == 1)

    def with_edge(self, i: int, j: int, value: int) -> 'DirectedNetwork':
        adj = self._adj.copy()
        adj[i, j] = 1 if value else 0
        return DirectedNetwork(adj, id_offset=self.id_offset)

    def copy_adjacency(self) -> np.ndarray:
        """Private writable copy for samplers."""
        return self._adj.copy()

    def __eq__(self, other):
        if not isinstance(other, DirectedNetwork):
            return NotImplemented
        return self.n_nodes == other.n_nodes and np.array_equal(self._adj, other._adj)

    __hash__ = None

    def __repr__(self):
        return f"DirectedNetwork(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


def dyad_iter(net: DirectedNetwork) -> Iterator[Dyad]:
    """All N(N-1) ordered dyads, sender-major, receiver ascending, skipping i == j."""
    n = net.n_nodes
    for i in range(n):
        for j in range(n):
            if i != j:
                yield Dyad(i, j)


def dyad_index_arrays(n_nodes: int):
    """(senders, receivers) arrays in the same order as dyad_iter."""
    return np.nonzero(~np.eye(n_nodes, dtype=bool))


def load_network(edge_list_path: str, n_nodes: int, one_based: bool = False) -> DirectedNetwork:
    """Read a `from,to` edge-list CSV. Duplicate rows collapse to one edge.

    Row numbers in errors count data rows from 1, header excluded.
    """
    try:
        frame = pd.read_csv(edge_list_path, header=None, dtype=str, keep_default_na=False,
                            skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=[0, 1])

    if len(frame) and [str(v).strip().lower() for v in frame.iloc[0].tolist()] == ['from', 'to']:
        frame = frame.iloc[1:]
    if frame.shape[1] != 2:
        raise NetworkFormatError(f"{edge_list_path}: expected 2 columns (from,to), got {frame.shape[1]}")

    offset = 1 if one_based else 0
    edges = []
    for row, (src, dst) in enumerate(frame.itertuples(index=False, name=None), start=1):
        try:
            i = int(str(src).strip()) - offset
            j = int(str(dst).strip()) - offset
        except ValueError:
            raise NetworkFormatError(f"non-integer node id ({src!r},{dst!r})", row=row) from None
        if i == j:
            raise NetworkFormatError(f"self-loop {src}->{dst}", row=row)
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise NetworkFormatError(f"node id out of range for n_nodes={n_nodes}: {src}->{dst}", row=row)
        edges.append((i, j))

    net = DirectedNetwork.from_edges(n_nodes, edges, id_offset=offset)
    logger.debug(f"[Network] Loaded {net.n_edges} edges on {n_nodes} nodes from {edge_list_path}")
    return net


def save_network(net: DirectedNetwork, path: str, one_based: Optional[bool] = None):
    """Write the edge list as `from,to` CSV using the network's id convention by default."""
    offset = net.id_offset if one_based is None else (1 if one_based else 0)
    edges = net.edges() + offset
    pd.DataFrame({'from': edges[:, 0], 'to': edges[:, 1]}).to_csv(path, index=False)
    return path


class CovariateTable:
    """N x P node attributes with typed columns.

    Categorical columns hold dense integer codes 0..K-1 with a code book
    mapping code -> original label; continuous columns hold floats.
    """

    def __init__(self, columns: Mapping[str, Sequence], kinds: Mapping[str, str],
                 codebooks: Optional[Mapping[str, Dict[int, str]]] = None, n_nodes: Optional[int] = None):
        if set(columns) != set(kinds):
            raise CovariateError("columns and kinds must name the same columns")
        if not columns and n_nodes is None:
            raise CovariateError("a covariate table without columns needs n_nodes")
        self._columns: Dict[str, np.ndarray] = {}
        self._kinds: Dict[str, str] = {}
        self._codebooks: Dict[str, Dict[int, str]] = {}
        n = n_nodes
        for name, values in columns.items():
            kind = kinds[name]
            if kind not in COLUMN_KINDS:
                raise CovariateError(f"column {name!r}: unknown kind {kind!r}")
            arr = np.asarray(values)
            if arr.ndim != 1:
                raise CovariateError(f"column {name!r} must be one-dimensional")
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise CovariateError(f"column {name!r} has {len(arr)} rows, expected {n}")
            if kind == CATEGORICAL:
                arr = arr.astype(np.int64)
                book = dict((codebooks or {}).get(name) or {int(c): str(c) for c in np.unique(arr)})
                self._codebooks[name] = {int(k): str(v) for k, v in book.items()}
            else:
                arr = arr.astype(np.float64)
                if not np.isfinite(arr).all():
                    raise CovariateError(f"column {name!r} has missing or non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            self._columns[name] = arr
            self._kinds[name] = kind
        self.n_nodes = int(n)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: Mapping[str, str]) -> 'CovariateTable':
        columns, kinds, books = {}, {}, {}
        for name, kind in schema.items():
            if name not in frame.columns:
                raise CovariateError(f"declared column {name!r} not found")
            series = frame[name]
            if series.isna().any():
                row = int(np.flatnonzero(series.isna().to_numpy())[0]) + 1
                raise CovariateError(
                    f"column {name!r} row {row}: missing value; missing covariate data is not "
                    f"supported (impute before loading)")
            if kind == CATEGORICAL:
                codes, uniques = pd.factorize(series.astype(str).str.strip())
                columns[name] = codes
                books[name] = {i: str(u) for i, u in enumerate(uniques)}
            elif kind == CONTINUOUS:
                try:
                    columns[name] = pd.to_numeric(series, errors='raise').to_numpy(dtype=float)
                except (ValueError, TypeError):
                    raise CovariateError(f"column {name!r} is declared continuous but is not numeric") from None
            else:
                raise CovariateError(f"column {name!r}: unknown kind {kind!r}")
            kinds[name] = kind
        return cls(columns, kinds, books, n_nodes=len(frame))

    @classmethod
    def empty(cls, n_nodes: int) -> 'CovariateTable':
        """A table with no columns, for models without covariate terms."""
        return cls({}, {}, n_nodes=n_nodes)

    @property
    def names(self):
        return list(self._columns)

    def kind(self, name: str) -> str:
        if name not in self._kinds:
            raise CovariateError(f"unknown covariate column {name!r}")
        return self._kinds[name]

    def values(self, name: str) -> np.ndarray:
        self.kind(name)
        return self._columns[name]

    def codebook(self, name: str) -> Dict[int, str]:
        return dict(self._codebooks.get(name, {}))

    def take(self, rows) -> 'CovariateTable':
        rows = np.asarray(rows, dtype=np.int64)
        return CovariateTable({k: v[rows] for k, v in self._columns.items()}, self._kinds,
                              self._codebooks, n_nodes=len(rows))

    def to_frame(self, decode: bool = True) -> pd.DataFrame:
        data = {}
        for name, arr in self._columns.items():
            if decode and self._kinds[name] == CATEGORICAL:
                book = self._codebooks[name]
                data[name] = [book[int(c)] for c in arr]
            else:
                data[name] = arr
        return pd.DataFrame(data)

    def schema(self) -> Dict[str, str]:
        return dict(self._kinds)

    def __repr__(self):
        return f"CovariateTable(n_nodes={self.n_nodes}, columns={self.names})"


def load_covariates(csv_path: str, schema: Mapping[str, str],
                    n_nodes: Optional[int] = None) -> CovariateTable:
    """Read a covariate CSV (one row per node in node-id order) and type it by schema."""
    try:
        header = pd.read_csv(csv_path, header=None, nrows=1, dtype=str).iloc[0].tolist()
    except pd.errors.EmptyDataError:
        raise CovariateError(f"{csv_path}: empty covariate file") from None
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise CovariateError(f"{csv_path}: duplicate column names {dupes}")
    frame = pd.read_csv(csv_path)
    if n_nodes is not None and len(frame) != n_nodes:
        raise CovariateError(f"{csv_path}: {len(frame)} rows for a {n_nodes}-node network")
    return CovariateTable.from_frame(frame, schema)


def write_codebook(table: CovariateTable, path: str):
    """JSON code book for every categorical column: {column: {code: label}}."""
    books = {name: {str(k): v for k, v in table.codebook(name).items()}
             for name in table.names if table.kind(name) == CATEGORICAL}
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(books, f, indent=2)
        f.write('\n')
    return path
