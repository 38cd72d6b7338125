import json
import os

import numpy as np
import pandas as pd

from . import config


def derive_seeds(master_seed, n):
    """Child seeds for n tasks: task k gets child k of SeedSequence(master_seed).

    The split depends only on (master_seed, k), so serial and parallel runs agree.
    """
    children = np.random.SeedSequence(int(master_seed)).spawn(int(n))
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def write_json(path, payload):
    """Write a JSON report with the schema version field first."""
    doc = {'schema_version': config.SCHEMA_VERSION}
    doc.update(payload)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(_clean(doc), f, indent=2, default=_to_builtin, allow_nan=False)
        f.write('\n')
    return path


def read_json(path):
    with open(path) as f:
        return json.load(f)


def read_labels_csv(path):
    """Read a label vector from a CSV with a `label` column (or a single column)."""
    frame = pd.read_csv(path)
    if 'label' in frame.columns:
        column = frame['label']
    elif frame.shape[1] == 1:
        column = frame.iloc[:, 0]
    else:
        raise ValueError(f"{path}: expected a 'label' column")
    if column.isna().any():
        raise ValueError(f"{path}: missing labels")
    return column.to_numpy()


def write_labels_csv(path, labels):
    pd.DataFrame({'node': np.arange(len(labels)), 'label': np.asarray(labels)}).to_csv(path, index=False)


def _clean(value):
    """Recursively replace non-finite floats (including numpy scalars and arrays) with None."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def _to_builtin(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        v = float(value)
        return None if not np.isfinite(v) else v
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def finite_or_none(values):
    """List of floats with NaN/inf replaced by None (JSON has no NaN)."""
    return [float(v) if np.isfinite(v) else None
            for v in np.asarray(values, dtype=float).ravel()]
