"""Single-file checkpoint bundles: named ``.npy`` tensors plus a JSON metadata document.

Layout inside the zip archive::

    metadata.json            format_version, stage, step, config snapshot, ...
    params/<name>.npy        model state (parameters and buffers)
    optimizer/<name>/<key>.npy
    rng/<name>.npy

Entries are written in sorted order with a fixed timestamp, so saving the same
state twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .exceptions import CheckpointError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointBundle:
    stage: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


@dataclass
class LoadReport:
    restored: list[str]
    initialized: list[str]
    skipped: list[str]

    def summary(self) -> str:
        return (f"restored {len(self.restored)} tensors, kept {len(self.initialized)} freshly "
                f"initialised, ignored {len(self.skipped)} from the bundle")


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr, order="C"), allow_pickle=False)  # ascontiguousarray would turn 0-d into 1-d
    return buf.getvalue()


def save_bundle(bundle: CheckpointBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.metadata, format_version=FORMAT_VERSION, stage=int(bundle.stage))
    entries = {"metadata.json": json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")}
    for prefix, tensors in (("params", bundle.params), ("optimizer", bundle.optimizer), ("rng", bundle.rng)):
        for name, arr in tensors.items():
            entries[f"{prefix}/{name}.npy"] = _npy_bytes(arr)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            zf.writestr(zipfile.ZipInfo(name, date_time=_EPOCH), entries[name])
    tmp.replace(path)
    return path


def load_bundle(path) -> CheckpointBundle:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path} is not a checkpoint bundle") from exc
    with zf:
        try:
            meta = json.loads(zf.read("metadata.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path} has no metadata.json") from exc
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "optimizer": {}, "rng": {}}
        for name in zf.namelist():
            head, _, rest = name.partition("/")
            if head in groups and rest.endswith(".npy"):
                groups[head][rest[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return CheckpointBundle(int(meta["stage"]), groups["params"], groups["optimizer"], groups["rng"], meta)


def model_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def optimizer_state(optimizer: torch.optim.Optimizer, model: nn.Module) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        for key, val in state.items():
            if torch.is_tensor(val):
                out[f"{names[id(p)]}/{key}"] = val.detach().cpu().numpy().copy()
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, tensors: dict[str, np.ndarray]):
    params = dict(model.named_parameters())
    optimizer.state.clear()
    for key, arr in tensors.items():
        name, _, slot = key.rpartition("/")
        if name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        optimizer.state[params[name]][slot] = torch.from_numpy(arr.copy())


def rng_state() -> dict[str, np.ndarray]:
    return {"torch": torch.get_rng_state().numpy().copy()}


def restore_rng(tensors: dict[str, np.ndarray]):
    if "torch" in tensors:
        torch.set_rng_state(torch.from_numpy(tensors["torch"].copy()))


def load_into(model: nn.Module, bundle: CheckpointBundle, prefixes: tuple[str, ...] | None = None) -> LoadReport:
    """Copy bundle tensors into ``model``.

    With ``prefixes`` only names under those prefixes are restored; the rest of
    the model keeps its initialisation and other bundle entries are ignored.
    Any unmatched name or shape within the restored scope is an error.
    """
    state = model.state_dict()

    def in_scope(name):
        return prefixes is None or name.startswith(prefixes)

    wanted = {n for n in state if in_scope(n)}
    offered = {n for n in bundle.params if in_scope(n)}
    problems = []
    if wanted - offered:
        problems.append("missing from bundle: " + ", ".join(sorted(wanted - offered)))
    if offered - wanted:
        problems.append("not in model: " + ", ".join(sorted(offered - wanted)))
    for n in sorted(wanted & offered):
        if tuple(state[n].shape) != tuple(bundle.params[n].shape):
            problems.append(f"shape mismatch for {n}: model {tuple(state[n].shape)} "
                            f"vs bundle {tuple(bundle.params[n].shape)}")
    if problems:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    with torch.no_grad():
        for n in wanted:
            state[n].copy_(torch.from_numpy(bundle.params[n]))
    return LoadReport(sorted(wanted), sorted(set(state) - wanted), sorted(set(bundle.params) - offered))
