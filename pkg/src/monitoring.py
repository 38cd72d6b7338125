import json
import logging
import threading
from datetime import datetime
from typing import Any, Dict, List, Optional

from . import config

LOG_FORMAT = '%(asctime)s - SRFM-ERGM - %(levelname)s - %(message)s'


def setup_logging(level: Optional[str] = None):
    """Configure root logging once for scripts and the CLI."""
    level = (level or config.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))


class RunMonitor:
    """Collects structured run events; optionally mirrors them to a JSONL sidecar.

    Result files stay deterministic because timestamps are written only here.
    """

    def __init__(self):
        self.events: List[Dict[str, Any]] = []
        self.sidecar_path: Optional[str] = None
        self._lock = threading.Lock()

    def attach(self, path: str):
        self.sidecar_path = path
        with open(path, 'w'):
            pass

    def detach(self):
        self.sidecar_path = None

    def reset(self):
        with self._lock:
            self.events = []

    def record(self, event: str, **fields):
        entry = {'event': event}
        entry.update(fields)
        with self._lock:
            self.events.append(entry)
            if self.sidecar_path:
                stamped = dict(entry, timestamp=datetime.now().isoformat())
                try:
                    with open(self.sidecar_path, 'a') as f:
                        f.write(json.dumps(stamped, default=_jsonable) + '\n')
                except OSError as e:
                    logging.getLogger(__name__).warning(f"[Monitor] Failed to write sidecar: {e}")

    def send_start_trace(self, start: int, seed: int, status: str, trace: List[float]):
        """Per-start classification log pseudolikelihood trace."""
        self.record('cem_start', start=start, seed=seed, status=status,
                    iterations=len(trace), final=trace[-1] if trace else None, trace=trace)

    def send_replication(self, condition: str, replication: int, status: str, **metrics):
        self.record('replication', condition=condition, replication=replication,
                    status=status, **metrics)

    def send_sampler_diagnostic(self, message: str, **fields):
        self.record('sampler', message=message, **fields)

    def get_summary(self) -> Dict[str, Any]:
        counts: Dict[str, int] = {}
        failures = 0
        for e in self.events:
            counts[e['event']] = counts.get(e['event'], 0) + 1
            if e.get('status') not in (None, 'ok', 'converged'):
                failures += 1
        return {'event_counts': counts, 'non_ok_events': failures}


def _jsonable(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)


# Global monitor instance
monitor = RunMonitor()
