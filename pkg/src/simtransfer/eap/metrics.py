import logging
import os

import numpy as np
import pandas as pd

from .errors import CheckpointError

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1

#: Column order of ``metrics.csv``. ``total_samples`` counts every
#: environment step: pretraining, policy rollouts and paired error rollouts.
METRICS_COLUMNS = [
    "schema",
    "method",
    "phase",
    "iteration",
    "update",
    "env_index",
    "pretrain_samples",
    "policy_samples",
    "error_samples",
    "total_samples",
    "mean_return",
    "surrogate_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "epochs_run",
    "error_loss",
    "error_samples_added",
    "error_skipped",
    "faults",
    "status",
]


class MetricsWriter:
    """Appends one CSV row per update; a single writer per file."""

    def __init__(self, path, method):
        self.path = path
        self.method = method
        if not os.path.exists(path):
            pd.DataFrame(columns=METRICS_COLUMNS).to_csv(path, index=False)

    def append(self, **row):
        unknown = set(row) - set(METRICS_COLUMNS)
        if unknown:
            raise ValueError(f"MetricsWriter.append: unknown columns {sorted(unknown)}")
        row.setdefault("schema", METRICS_SCHEMA_VERSION)
        row.setdefault("method", self.method)
        row.setdefault("status", "ok")
        frame = pd.DataFrame([row], columns=METRICS_COLUMNS)
        frame.to_csv(self.path,
                     mode="a",
                     header=False,
                     index=False,
                     float_format="%.17g")
        return row


def read_metrics(path):
    frame = pd.read_csv(path, float_precision="round_trip")
    if len(frame) and int(frame["schema"].iloc[0]) != METRICS_SCHEMA_VERSION:
        raise CheckpointError(
            f"read_metrics: {path} has schema {frame['schema'].iloc[0]}, expected {METRICS_SCHEMA_VERSION}"
        )
    return frame


def final_total_samples(path):
    """Total environment steps reported by the last row of a metrics file."""
    frame = read_metrics(path)
    if not len(frame):
        raise CheckpointError(f"final_total_samples: {path} has no rows")
    return int(frame["total_samples"].iloc[-1])


def truncate_after(path, iteration):
    """Drop rows past ``iteration`` so a resumed run does not duplicate
    them."""
    frame = read_metrics(path)
    keep = frame[np.asarray(frame["iteration"]) <= iteration]
    keep.to_csv(path, index=False, float_format="%.17g")
    return len(frame) - len(keep)
