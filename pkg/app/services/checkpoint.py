"""Named-tensor checkpoints: ``manifest.json`` plus a little-endian ``payload.bin``."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn

from app.core.errors import CheckpointError
from app.models.training import CheckpointManifest, ModelConfig, Stage, TensorEntry
from app.services.network import build_model

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"

_NUMPY_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _dtype_name(tensor: torch.Tensor) -> str:
    return str(tensor.dtype).replace("torch.", "")


def _write(directory: Path, manifest: CheckpointManifest, arrays: Sequence[np.ndarray]):
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / PAYLOAD).open("wb") as handle:
        for entry, array in zip(manifest.tensors, arrays):
            handle.write(np.ascontiguousarray(array, dtype=_NUMPY_DTYPES[entry.dtype]).tobytes())
    (directory / MANIFEST).write_text(manifest.json(indent=2))


def _state(model: nn.Module) -> List[Tuple[str, np.ndarray, str]]:
    return [(name, p.detach().cpu().numpy(), _dtype_name(p)) for name, p in model.named_parameters()]


def _manifest_for(state, config: ModelConfig, seed: int, stage: Stage) -> CheckpointManifest:
    entries, offset = [], 0
    for name, array, dtype in state:
        if dtype not in _NUMPY_DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}", name)
        rows = int(array.shape[0]) if array.ndim else 1
        cols = int(np.prod(array.shape[1:])) if array.ndim > 1 else 1
        entries.append(TensorEntry(name=name, shape=list(array.shape), rows=rows, cols=cols, dtype=dtype, offset=offset))
        offset += array.size * np.dtype(_NUMPY_DTYPES[dtype]).itemsize
    return CheckpointManifest(model_config=config, seed=seed, stage=stage, tensors=entries)


def save_checkpoint(model: nn.Module, directory: Path, seed: int) -> CheckpointManifest:
    directory = Path(directory)
    state = _state(model)
    manifest = _manifest_for(state, model.config, seed, model.stage)
    _write(directory, manifest, [array for _, array, _ in state])
    logger.debug(f"Saved {len(state)} tensors to {directory}")
    return manifest


def read_manifest(directory: Path) -> CheckpointManifest:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    try:
        return CheckpointManifest(**json.loads(path.read_text()))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(f"malformed checkpoint manifest {path}: {e}")


def read_tensors(directory: Path) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    raw = (directory / PAYLOAD).read_bytes() if (directory / PAYLOAD).is_file() else b""
    tensors = {}
    for entry in manifest.tensors:
        dtype = np.dtype(_NUMPY_DTYPES[entry.dtype])
        size = int(np.prod(entry.shape)) if entry.shape else 1
        end = entry.offset + size * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"payload of {directory} is truncated at {entry.name}", entry.name)
        tensors[entry.name] = np.frombuffer(raw, dtype=dtype, count=size, offset=entry.offset).reshape(entry.shape)
    return manifest, tensors


def load_into(model: nn.Module, tensors: Dict[str, np.ndarray]):
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]}", missing[0])
    with torch.no_grad():
        for name, param in own.items():
            value = torch.from_numpy(np.array(tensors[name]))
            if tuple(value.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(param.shape)}", name
                )
            param.copy_(value.to(param.dtype))


def load_checkpoint(directory: Path) -> Tuple[nn.Module, CheckpointManifest]:
    """Rebuild the model recorded in the manifest and fill in its weights."""
    manifest, tensors = read_tensors(directory)
    model = build_model(manifest.stage, manifest.model_config, manifest.seed)
    load_into(model, tensors)
    return model, manifest


def average_checkpoints(directories: Sequence[Path], out: Path) -> CheckpointManifest:
    """Element-wise mean of checkpoints that share one tensor layout."""
    if not directories:
        raise CheckpointError("nothing to average")
    loaded = [read_tensors(d) for d in directories]
    reference = loaded[0][0]
    for directory, (manifest, _) in zip(directories[1:], loaded[1:]):
        if manifest.layout() != reference.layout():
            mismatch = next(
                (a[0] for a, b in zip(reference.layout(), manifest.layout()) if a != b),
                "tensor count",
            )
            raise CheckpointError(f"{directory} has a different layout ({mismatch})", mismatch)
    arrays = [
        np.mean(np.stack([tensors[entry.name] for _, tensors in loaded]), axis=0)
        for entry in reference.tensors
    ]
    _write(Path(out), reference, arrays)
    logger.info(f"Averaged {len(directories)} checkpoints into {out}")
    return reference
