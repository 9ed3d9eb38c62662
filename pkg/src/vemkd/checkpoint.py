"""Checkpoint container: JSON manifest plus raw little-endian payloads.

A checkpoint directory holds ``manifest.json`` describing every named
array ({name, dtype, shape, offset, nbytes} into ``payload.bin``), the
serialized RNG states (base64), the iteration counter, and free-form
metadata.  Arrays round-trip bitwise, which the trainer's resume contract
relies on.
"""

import base64
import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataIntegrityError

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}
_TORCH_NAMES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
}


def save_checkpoint(directory, arrays: dict, rng_states: dict = None,
                    iteration: int = 0, meta: dict = None) -> Path:
    """arrays: name -> torch.Tensor / np.ndarray; rng_states: name -> bytes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            dtype = _TORCH_NAMES[value.dtype]
            np_arr = value.detach().cpu().numpy()
        else:
            np_arr = np.asarray(value)
            dtype = str(np_arr.dtype)
        raw = np_arr.astype(_DTYPES[dtype]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(np_arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    manifest = {
        "iteration": int(iteration),
        "arrays": entries,
        "rng": {k: base64.b64encode(v).decode() for k, v in (rng_states or {}).items()},
        "meta": meta or {},
    }
    (directory / "payload.bin").write_bytes(bytes(payload))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return directory


def load_checkpoint(directory):
    """Return (arrays: name -> np.ndarray, rng_states: name -> bytes,
    iteration, meta)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    payload_path = directory / "payload.bin"
    if not manifest_path.exists() or not payload_path.exists():
        raise DataIntegrityError(f"incomplete checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    payload = payload_path.read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    rng_states = {k: base64.b64decode(v) for k, v in manifest.get("rng", {}).items()}
    return arrays, rng_states, manifest["iteration"], manifest.get("meta", {})


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    """Flatten a module state dict (parameters and buffers) into named arrays."""
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_arrays(prefix: str, module: torch.nn.Module, arrays: dict) -> None:
    state = module.state_dict()
    loaded = {}
    for key, template in state.items():
        name = f"{prefix}.{key}"
        if name not in arrays:
            raise DataIntegrityError(f"checkpoint missing array {name}")
        loaded[key] = torch.from_numpy(arrays[name]).to(template.dtype).reshape(template.shape)
    module.load_state_dict(loaded)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    state = optimizer.state_dict()["state"]
    for idx, entry in state.items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                out[f"{prefix}.{idx}.{key}"] = value
            else:
                out[f"{prefix}.{idx}.{key}"] = np.asarray(value, dtype=np.float64)
    return out


def load_optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer, arrays: dict) -> None:
    """Restore Adam state saved by optimizer_arrays into a fresh optimizer."""
    sd = optimizer.state_dict()
    state = {}
    matched = {k: v for k, v in arrays.items() if k.startswith(prefix + ".")}
    for name, value in matched.items():
        rest = name[len(prefix) + 1 :]
        idx_str, key = rest.split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        tensor = torch.from_numpy(value)
        if key == "step":
            entry[key] = tensor.reshape(()).to(torch.float32)
        else:
            entry[key] = tensor.to(torch.float32)
    sd["state"] = state
    optimizer.load_state_dict(sd)
