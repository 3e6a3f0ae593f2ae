"""Checkpoint archives for trained systems.

One zip archive per experiment. Parameter blobs are stored as named
little-endian float32 arrays under ``params/<component>/<task>/<name>.npy``,
indexed by a ``meta.json`` record that also carries the privacy-ledger state
and a config snapshot. The format is self-describing and readable without
this package: any zip tool plus ``numpy.load`` recovers every array.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_SHARED = "_shared"
_META = "meta.json"

ParamTree = dict[tuple[str, str], dict[str, np.ndarray]]


def system_parameters(system) -> ParamTree:
    """All arrays of a system keyed by (component, task_id) then tensor name."""
    out: ParamTree = {("encoder", _SHARED): _module_arrays(system.encoder)}
    for task_id, branch in system.branches.items():
        out[("metamorph", task_id)] = _module_arrays(branch.metamorph)
        out[("head", task_id)] = _module_arrays(branch.head)
    return out


def _module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def _entry_path(component: str, task_id: str, name: str) -> str:
    return f"params/{component}/{task_id}/{name}.npy"


def save_checkpoint(
    path,
    params: ParamTree,
    *,
    ledger_state: Mapping | None = None,
    config: Mapping | None = None,
) -> None:
    """Write arrays plus ledger state and config snapshot to ``path``."""
    entries = []
    try:
        meta_blob = json.dumps(
            {
                "format": FORMAT_VERSION,
                "ledger": dict(ledger_state) if ledger_state is not None else None,
                "config": dict(config) if config is not None else None,
                "entries": entries,
            },
            indent=1,
            sort_keys=True,
            default=_reject_unserializable,
        )
    except TypeError as exc:
        raise CheckpointError(f"config snapshot is not serializable: {exc}") from exc

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        for (component, task_id), arrays in sorted(params.items()):
            for name, array in sorted(arrays.items()):
                blob = io.BytesIO()
                np.save(blob, np.asarray(array).astype("<f4"))
                arc_path = _entry_path(component, task_id, name)
                archive.writestr(arc_path, blob.getvalue())
                entries.append(
                    {
                        "component": component,
                        "task_id": task_id,
                        "name": name,
                        "shape": list(np.asarray(array).shape),
                        "path": arc_path,
                    }
                )
        meta_blob = json.dumps(
            {
                "format": FORMAT_VERSION,
                "ledger": dict(ledger_state) if ledger_state is not None else None,
                "config": dict(config) if config is not None else None,
                "entries": entries,
            },
            indent=1,
            sort_keys=True,
        )
        archive.writestr(_META, meta_blob)


def _reject_unserializable(value):
    raise TypeError(f"{type(value).__name__} value {value!r}")


@dataclass
class Checkpoint:
    params: ParamTree
    ledger_state: dict | None
    config: dict | None


def load_checkpoint(path) -> Checkpoint:
    """Read an archive back; any corruption surfaces as CheckpointError."""
    try:
        with zipfile.ZipFile(path, "r") as archive:
            bad = archive.testzip()
            if bad is not None:
                raise CheckpointError(f"corrupt archive entry {bad!r}")
            try:
                meta = json.loads(archive.read(_META))
            except KeyError as exc:
                raise CheckpointError(f"archive has no {_META}") from exc
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"unreadable {_META}: {exc}") from exc
            if meta.get("format") != FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint format {meta.get('format')!r}"
                )
            params: ParamTree = {}
            for entry in meta.get("entries", []):
                key = (entry["component"], entry["task_id"])
                blob = io.BytesIO(archive.read(entry["path"]))
                array = np.load(blob)
                if array.dtype != np.dtype("<f4"):
                    raise CheckpointError(
                        f"{entry['path']} holds dtype {array.dtype}, expected <f4"
                    )
                if list(array.shape) != list(entry["shape"]):
                    raise CheckpointError(
                        f"{entry['path']} shape {list(array.shape)} does not match "
                        f"indexed shape {entry['shape']}"
                    )
                params.setdefault(key, {})[entry["name"]] = array
            return Checkpoint(
                params=params,
                ledger_state=meta.get("ledger"),
                config=meta.get("config"),
            )
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def save_system(path, system, *, ledger=None, config: Mapping | None = None) -> None:
    save_checkpoint(
        path,
        system_parameters(system),
        ledger_state=ledger.state() if ledger is not None else None,
        config=config,
    )


def load_into_system(path, system) -> Checkpoint:
    """Restore a system's parameters in place from an archive.

    The archive must describe exactly the same components, tasks, tensor
    names, and shapes as the system; any mismatch names the offending key.
    """
    checkpoint = load_checkpoint(path)
    expected = system_parameters(system)
    missing = sorted(set(expected) - set(checkpoint.params))
    extra = sorted(set(checkpoint.params) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"component mismatch: archive lacks {missing}, has unexpected {extra}"
        )
    modules = {("encoder", _SHARED): system.encoder}
    for task_id, branch in system.branches.items():
        modules[("metamorph", task_id)] = branch.metamorph
        modules[("head", task_id)] = branch.head
    for key, module in modules.items():
        stored = checkpoint.params[key]
        state = module.state_dict()
        if set(stored) != set(state):
            raise CheckpointError(
                f"tensor names for {key} differ: archive {sorted(stored)} "
                f"vs module {sorted(state)}"
            )
        with torch.no_grad():
            for name, tensor in state.items():
                array = stored[name]
                if tuple(array.shape) != tuple(tensor.shape):
                    raise CheckpointError(
                        f"{key}/{name}: archive shape {tuple(array.shape)} "
                        f"vs module shape {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.from_numpy(array.copy()))
    return checkpoint
