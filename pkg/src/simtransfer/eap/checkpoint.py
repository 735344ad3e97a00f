import glob
import json
import logging
import os

import numpy as np
import xarray as xr

from .errors import CheckpointError
from .networks import AdamState

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def _var(name):
    return name.replace(".", "__")


def _key(var):
    return var.replace("__", ".")


def save_checkpoint(path, tensors, payload):
    """Write named arrays and a JSON-serializable payload to a netCDF file.

    Every array becomes its own variable with private dimensions, so float64
    values round-trip exactly. The file is written next to ``path`` and moved
    into place, leaving the previous checkpoint intact if writing fails.
    """
    data_vars = {}
    empty = {}
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.size == 0:
            empty[name] = list(array.shape)
            continue
        var = _var(name)
        dims = tuple(f"{var}_d{i}" for i in range(array.ndim))
        data_vars[var] = (dims, array)
    dataset = xr.Dataset(data_vars)
    dataset.attrs["format_version"] = CHECKPOINT_FORMAT_VERSION
    dataset.attrs["payload"] = json.dumps(payload)
    dataset.attrs["empty"] = json.dumps(empty)
    tmp = f"{path}.tmp"
    dataset.to_netcdf(tmp)
    os.replace(tmp, path)
    logger.debug("checkpoint written to %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(tensors, payload)``."""
    if not os.path.exists(path):
        raise CheckpointError(f"load_checkpoint: no checkpoint at {path}")
    try:
        with xr.open_dataset(path) as dataset:
            dataset.load()
            version = int(dataset.attrs.get("format_version", -1))
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"load_checkpoint: {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
                )
            tensors = {_key(v): dataset[v].values.copy() for v in dataset.data_vars}
            payload = json.loads(dataset.attrs["payload"])
            empty = json.loads(dataset.attrs.get("empty", "{}"))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"load_checkpoint: cannot read {path}: {exc}") from None
    for name, shape in empty.items():
        tensors[name] = np.zeros(shape)
    return tensors, payload


def checkpoint_path(run_dir, iteration):
    return os.path.join(run_dir, "checkpoints", f"ckpt_{iteration:06d}.nc")


def latest_checkpoint(run_dir):
    paths = sorted(glob.glob(os.path.join(run_dir, "checkpoints", "ckpt_*.nc")))
    if not paths:
        raise CheckpointError(f"latest_checkpoint: no checkpoint in {run_dir}")
    return paths[-1]


def adam_tensors(prefix, opt):
    tensors = {f"{prefix}.m.{k}": v for k, v in opt.m.items()}
    tensors.update({f"{prefix}.v.{k}": v for k, v in opt.v.items()})
    return tensors


def adam_payload(opt):
    return {
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "step": opt.step
    }


def restore_adam(prefix, tensors, payload, names):
    return AdamState(m={k: tensors[f"{prefix}.m.{k}"] for k in names},
                     v={k: tensors[f"{prefix}.v.{k}"] for k in names},
                     **payload)


def learner_tensors(prefix, learner):
    tensors = {
        f"{prefix}.policy.{k}": v for k, v in learner.policy.parameters().items()
    }
    tensors.update({
        f"{prefix}.value.{k}": v
        for k, v in learner.value_net.parameters().items()
    })
    tensors.update(adam_tensors(f"{prefix}.policy_opt", learner.policy_opt))
    tensors.update(adam_tensors(f"{prefix}.value_opt", learner.value_opt))
    return tensors


def learner_payload(learner):
    return {
        "policy_opt": adam_payload(learner.policy_opt),
        "value_opt": adam_payload(learner.value_opt),
        "n_updates": learner.n_updates,
    }


def restore_learner(prefix, learner, tensors, payload):
    """Load parameters and optimizer state into an already-built learner."""
    policy_names = list(learner.policy.parameters())
    value_names = list(learner.value_net.parameters())
    try:
        learner.policy.set_parameters(
            {k: tensors[f"{prefix}.policy.{k}"] for k in policy_names})
        learner.value_net.set_parameters(
            {k: tensors[f"{prefix}.value.{k}"] for k in value_names})
        learner.policy_opt = restore_adam(f"{prefix}.policy_opt", tensors,
                                          payload["policy_opt"], policy_names)
        learner.value_opt = restore_adam(f"{prefix}.value_opt", tensors,
                                         payload["value_opt"], value_names)
    except KeyError as exc:
        raise CheckpointError(f"restore_learner: missing tensor {exc}") from None
    learner.n_updates = int(payload["n_updates"])
    return learner
