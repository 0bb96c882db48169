"""Versioned checkpoint archive.

A checkpoint is a NumPy ``.npz`` (zip) archive with no pickled objects:

* ``tensor/<name>`` -- one array per entry of the model's ``state_dict``
* ``__meta__`` -- UTF-8 JSON stored as a uint8 array, holding
  ``format`` ("sekws-checkpoint"), ``version``, ``kind`` (estimator class
  name), ``params`` (constructor arguments), ``frozen`` (names of tensors
  whose freeze flag is set), ``dtype`` and free-form ``metadata``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError

FORMAT = "sekws-checkpoint"
VERSION = 1


def _registry():
    from .enhancer import ConvTasNetEnhancer
    from .injection import SoftSwitch
    from .spotter import KeywordSpotter
    return {cls.__name__: cls for cls in (ConvTasNetEnhancer, KeywordSpotter, SoftSwitch)}


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if hasattr(v, "values") and not isinstance(v, dict):
            v = list(v.values)
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def save_checkpoint(path, estimator, metadata: dict | None = None) -> Path:
    module = estimator.module_
    frozen = [n for n, p in module.named_parameters() if not p.requires_grad]
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": type(estimator).__name__,
        "params": _jsonable(estimator.get_params()),
        "frozen": frozen,
        "metadata": metadata or {},
    }
    arrays = {f"tensor/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path} is not a {FORMAT} archive")
        meta = json.loads(z["__meta__"].tobytes().decode())
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format {meta.get('format')!r}")
    if meta.get("version", 0) > VERSION:
        raise CheckpointError(f"{path}: version {meta['version']} is newer than {VERSION}")
    return meta


def load_checkpoint(path):
    """Rebuild the saved estimator with its parameters and freeze flags."""
    meta = read_meta(path)
    cls = _registry().get(meta["kind"])
    if cls is None:
        raise CheckpointError(f"{path}: unknown estimator kind {meta['kind']!r}")
    est = cls(**meta["params"]).initialize()
    with np.load(path, allow_pickle=False) as z:
        state = {k[len("tensor/"):]: torch.from_numpy(z[k].copy())
                 for k in z.files if k.startswith("tensor/")}
    est.module_.load_state_dict(state)
    frozen = set(meta["frozen"])
    for n, p in est.module_.named_parameters():
        p.requires_grad_(n not in frozen)
    est.checkpoint_metadata_ = meta["metadata"]
    return est


def tensor_digest(module_or_estimator) -> str:
    """SHA-256 over every named tensor, for bit-level change detection."""
    module = getattr(module_or_estimator, "module_", module_or_estimator)
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
